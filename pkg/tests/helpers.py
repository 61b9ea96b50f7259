"""Shared test utilities."""

import numpy as np


def jitter(module, rng, scale=0.3):
    """Move every parameter to a generic point before a finite-difference check.

    Small-scale initialisations leave some gradients (attention queries, for
    instance) orders of magnitude below the loss, where central differences
    are dominated by roundoff. Gradient correctness does not depend on the
    evaluation point, so checks are run away from the initialisation.
    """
    for p in module.parameters():
        p.data += rng.normal(0.0, scale, size=p.shape).astype(p.data.dtype)
    return module


def sentence(heads, rels, tags, forms=None):
    from charparse.corpus import Sentence, Token

    forms = forms or [f"w{i}" for i in range(len(heads))]
    return Sentence(tuple(Token(i + 1, f, t, h, r) for i, (f, h, r, t) in enumerate(zip(forms, heads, rels, tags))))


def tree(heads, rels, tags):
    from charparse.parser import ParseTree

    return ParseTree(list(heads), list(rels), list(tags))


def metric_fixtures():
    """(name, gold sentences, predictions, hand-counted "UPOS/UAS/LAS")."""
    g1 = sentence([2, 0, 2, 2], ["det", "root", "obj", "punct"], ["DET", "VERB", "NOUN", "PUNCT"])
    g2 = sentence([2, 0, 2], ["nsubj", "root", "obj"], ["PRON", "VERB", "NOUN"])
    g3 = sentence([0, 1, 1, 3], ["root", "obj", "obl", "case"], ["VERB", "NOUN", "NOUN", "ADP"])
    g4 = sentence([2, 0, 2], ["nsubj", "root", "obj"], ["PRON", "VERB", "NOUN"], ["ana", "klit", "khobz"])
    return [
        ("identity", [g1], [tree(g1.heads, g1.deprels, g1.tags)], "100.00/100.00/100.00"),
        # heads right on tokens 1-2, label right only on token 1, every tag right
        ("two heads one label", [g2], [tree([2, 0, 1], ["nsubj", "dep", "obj"], g2.tags)], "100.00/66.67/33.33"),
        # no head right, so no label can count either
        ("all heads wrong", [g3], [tree([2, 0, 2, 2], ["root", "obj", "obl", "case"],
                                        ["VERB", "NOUN", "X", "X"])], "50.00/0.00/0.00"),
        # token-pooled over two sentences: tags 3+1, heads 3+2, labels 2+2 out of 7
        ("pooled", [g2, g3], [tree(g2.heads, ["nsubj", "root", "iobj"], g2.tags),
                              tree([0, 1, 2, 2], ["root", "obj", "x", "case"], ["VERB", "X", "X", "X"])],
         "57.14/71.43/57.14"),
        # token 1 has the right label on a wrong head, which does not count
        ("label without head", [g4], [tree([3, 0, 2], ["nsubj", "x", "obj"], ["PRON", "X", "NOUN"])],
         "66.67/66.67/33.33"),
    ]
