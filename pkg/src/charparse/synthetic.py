"""A small generative grammar for toy treebanks and raw corpora.

Sentences look like romanised dialectal Arabic with French code-switching and
come with gold UPOS tags and dependency trees, so the same distribution can
feed MLM pretraining and parser fine-tuning in tests and demos. Each lexeme
has several attested-looking spellings. Every sentence has a writer whose
habitual romanisation (or, for the last spelling slot, French) is used for
most words, the way real users stay fairly consistent within a message.
"""

from __future__ import annotations

from typing import Optional

import numpy as np

from .corpus import RawCorpus, Sentence, Token

# lexeme -> spellings
LEXICON: dict[str, dict[str, list[str]]] = {
    "NOUN_FOOD": {
        "bread": ["khobz", "5obz", "khobs"],
        "couscous": ["kosksi", "couscous", "kseksou"],
        "meat": ["l7am", "lham", "la7m"],
        "milk": ["7lib", "hlib", "lait"],
        "tea": ["atay", "ataye", "the"],
        "fruit": ["fakya", "fakia", "fruits"],
    },
    "NOUN_PLACE": {
        "house": ["dar", "dare", "maison"],
        "city": ["mdina", "lmdina", "ville"],
        "school": ["madrasa", "lekol", "ecole"],
        "market": ["souk", "sou9", "marche"],
        "country": ["bled", "blad", "pays"],
        "sea": ["b7ar", "bhar", "mer"],
    },
    "NOUN_PERSON": {
        "people": ["nas", "ness", "gens"],
        "friend": ["sahbi", "sa7bi", "copain"],
        "woman": ["mra", "mraa", "femme"],
        "children": ["wlad", "drari", "enfants"],
        "family": ["3ayla", "aila", "famille"],
        "brother": ["khouya", "5ouya", "frere"],
    },
    "VERB_EAT": {
        "ate": ["klit", "kla", "kelt"],
        "bought": ["chrit", "shrit", "chra"],
        "made": ["derna", "dert", "dar"],
    },
    "VERB_GO": {
        "went": ["mchit", "mcha", "msheet"],
        "entered": ["dkhelt", "d5elt", "dkhel"],
        "left": ["khrejt", "5rejt", "khraj"],
    },
    "VERB_SEE": {
        "saw": ["cheft", "shaft", "chaf"],
        "loved": ["7abit", "habit", "nhab"],
        "called": ["3ayat", "aayat", "appelit"],
    },
    "DET": {
        "the": ["el", "l", "le"],
        "this": ["had", "hed", "hadi"],
        "all": ["kol", "koul", "kolach"],
    },
    "ADJ": {
        "good": ["mlih", "mli7", "bien"],
        "big": ["kbir", "kbira", "grand"],
        "small": ["sghir", "sgher", "petit"],
        "new": ["jdid", "jdida", "nouveau"],
        "beautiful": ["zwin", "zine", "beau"],
    },
    "ADP": {
        "in": ["f", "fi", "dans"],
        "with": ["m3a", "ma3a", "avec"],
        "to": ["l", "li", "3and"],
        "from": ["men", "mn", "de"],
    },
    "PRON": {
        "I": ["ana", "ena", "moi"],
        "you": ["nta", "enta", "toi"],
        "he": ["howa", "houwa", "lui"],
        "we": ["7na", "hna", "ne7na"],
    },
    "ADV": {
        "much": ["bezzaf", "bzaf", "beaucoup", "bcp"],
        "now": ["daba", "dorka", "maintenant"],
        "tomorrow": ["ghodwa", "ghedwa", "demain"],
        "why": ["wa3lach", "w3lach", "3lach"],
    },
    "CCONJ": {"and": ["w", "ou", "et"], "but": ["walakin", "mais", "bss7"]},
    "PUNCT": {".": ["."], "!": ["!"], "?": ["?"]},
}

VERB_OBJECTS = {"VERB_EAT": "NOUN_FOOD", "VERB_GO": "NOUN_PLACE", "VERB_SEE": "NOUN_PERSON"}

# lexemes within a class are drawn with Zipfian weights 1 / rank**ZIPF_EXPONENT
ZIPF_EXPONENT = 1.0

# probability that a word uses the writer's habitual spelling slot
STYLE_CONSISTENCY = 0.9
N_STYLES = 3


def _zipf(n: int) -> np.ndarray:
    w = 1.0 / np.arange(1, n + 1) ** ZIPF_EXPONENT
    return w / w.sum()


class _Builder:
    def __init__(self, rng: np.random.Generator):
        self.rng = rng
        self.style = int(rng.integers(N_STYLES))
        self.words: list[str] = []
        self.upos: list[str] = []
        self.heads: list[int] = []
        self.rels: list[str] = []

    def pick(self, cls: str) -> str:
        lexemes = LEXICON[cls]
        lex = list(lexemes)[self.rng.choice(len(lexemes), p=_zipf(len(lexemes)))]
        spellings = lexemes[lex]
        if len(spellings) > 1 and self.rng.random() < STYLE_CONSISTENCY:
            return spellings[min(self.style, len(spellings) - 1)]
        return spellings[self.rng.integers(len(spellings))]

    def add(self, cls: str, upos: str, rel: str) -> int:
        self.words.append(self.pick(cls))
        self.upos.append(upos)
        self.heads.append(-1)
        self.rels.append(rel)
        return len(self.words)  # 1-based id

    def attach(self, dep: int, head: int) -> None:
        self.heads[dep - 1] = head

    def noun_phrase(self, cls: str, rel: str, adj_p: float = 0.4, det_p: float = 0.6) -> int:
        det = self.add("DET", "DET", "det") if self.rng.random() < det_p else None
        noun = self.add(cls, "NOUN", rel)
        if det is not None:
            self.attach(det, noun)
        if self.rng.random() < adj_p:
            self.attach(self.add("ADJ", "ADJ", "amod"), noun)
        return noun

    def subject(self) -> int:
        if self.rng.random() < 0.5:
            return self.add("PRON", "PRON", "nsubj")
        return self.noun_phrase("NOUN_PERSON", "nsubj", adj_p=0.2)

    def clause(self, rel: str) -> int:
        subj = self.subject() if self.rng.random() < 0.7 else None
        vcls = ("VERB_EAT", "VERB_GO", "VERB_SEE")[self.rng.integers(3)]
        verb = self.add(vcls, "VERB", rel)
        if subj is not None:
            self.attach(subj, verb)
        obj_cls = VERB_OBJECTS[vcls]
        if vcls == "VERB_GO":
            adp = self.add("ADP", "ADP", "case")
            noun = self.noun_phrase(obj_cls, "obl")
            self.attach(adp, noun)
            self.attach(noun, verb)
        else:
            self.attach(self.noun_phrase(obj_cls, "obj"), verb)
        if self.rng.random() < 0.35:
            adp = self.add("ADP", "ADP", "case")
            noun = self.noun_phrase("NOUN_PERSON" if self.rng.random() < 0.5 else "NOUN_PLACE", "obl", adj_p=0.2)
            self.attach(adp, noun)
            self.attach(noun, verb)
        if self.rng.random() < 0.3:
            self.attach(self.add("ADV", "ADV", "advmod"), verb)
        return verb

    def sentence(self) -> Sentence:
        root = self.clause("root")
        self.attach(root, 0)
        if self.rng.random() < 0.25:
            cc = self.add("CCONJ", "CCONJ", "cc")
            second = self.clause("conj")
            self.attach(cc, second)
            self.attach(second, root)
        self.attach(self.add("PUNCT", "PUNCT", "punct"), root)
        tokens = tuple(
            Token(id=i + 1, form=w, upos=u, head=h, deprel=r)
            for i, (w, u, h, r) in enumerate(zip(self.words, self.upos, self.heads, self.rels))
        )
        return Sentence(tokens)


def generate_treebank(n: int, seed: int = 0) -> list[Sentence]:
    rng = np.random.default_rng([seed, 100])
    return [_Builder(rng).sentence() for _ in range(n)]


def generate_corpus(n: int, seed: int = 0) -> RawCorpus:
    rng = np.random.default_rng([seed, 200])
    return RawCorpus([_Builder(rng).sentence().words for _ in range(n)])


def toy_splits(seed: int = 0, n_train: int = 16, n_dev: int = 40, n_test: int = 40,
               n_raw: Optional[int] = None):
    """Disjointly seeded train/dev/test treebanks and, optionally, a raw corpus."""
    train = generate_treebank(n_train, seed)
    dev = generate_treebank(n_dev, seed + 1000)
    test = generate_treebank(n_test, seed + 2000)
    raw = generate_corpus(n_raw, seed + 3000) if n_raw else None
    return train, dev, test, raw
