"""Joint MLP tagger and biaffine graph parser over contextual word vectors."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .autodiff import MLP, Embedding, Linear, Module, Parameter, Tensor, ops
from .autodiff.tape import get_dtype
from .corpus import Sentence
from .mst import decode_heads

UNK_WORD = "<unk>"


@dataclass
class ParserConfig:
    word_dim: int = 64
    tag_dim: int = 32
    tagger_hidden: int = 128
    arc_dim: int = 128
    label_dim: int = 64
    dropout: float = 0.1
    lambda_tag: float = 1.0
    lowercase: bool = False
    word_min_count: int = 2
    unk_replace: float = 0.25


@dataclass
class ParseTree:
    heads: list[int]
    labels: list[str]
    tags: list[str]

    def __post_init__(self):
        if not (len(self.heads) == len(self.labels) == len(self.tags)):
            raise ValueError("heads, labels and tags must have one entry per token")


@dataclass
class Vocabularies:
    """Closed sets taken from the training treebank."""

    words: list[str]  # index 0 is UNK_WORD
    word_counts: dict[str, int]
    tags: list[str]
    labels: list[str]

    @classmethod
    def build(cls, sentences: Sequence[Sentence], cfg: ParserConfig) -> "Vocabularies":
        norm = str.lower if cfg.lowercase else (lambda w: w)
        counts = Counter(norm(t.form) for s in sentences for t in s.tokens)
        words = [UNK_WORD] + sorted(w for w, c in counts.items() if c >= cfg.word_min_count)
        tags = sorted({t.upos for s in sentences for t in s.tokens})
        labels = sorted({t.deprel for s in sentences for t in s.tokens})
        if not tags or not labels:
            raise ValueError("tag set and label set must be non-empty")
        return cls(words, {w: counts[w] for w in words[1:]}, tags, labels)

    def dumps(self) -> str:
        """Sections separated by blank lines: words with counts, tags, labels."""
        word_lines = [f"{w}\t{self.word_counts.get(w, 0)}" for w in self.words[1:]]
        return "\n".join(word_lines) + "\n\n" + "\n".join(self.tags) + "\n\n" + "\n".join(self.labels) + "\n"

    @classmethod
    def loads(cls, text: str) -> "Vocabularies":
        parts = text.rstrip("\n").split("\n\n")
        if len(parts) != 3:
            raise ValueError("parser vocabulary file needs three sections")
        words, counts = [UNK_WORD], {}
        for line in parts[0].split("\n"):
            if line:
                w, c = line.rsplit("\t", 1)
                words.append(w)
                counts[w] = int(c)
        return cls(words, counts, parts[1].split("\n"), parts[2].split("\n"))


class Parser(Module):
    def __init__(self, cfg: ParserConfig, vocabs: Vocabularies, d_lm: int, rng: np.random.Generator):
        self.cfg = cfg
        self.vocabs = vocabs
        self.d_lm = d_lm
        self.word_index = {w: i for i, w in enumerate(vocabs.words)}
        self.tag_index = {t: i for i, t in enumerate(vocabs.tags)}
        self.label_index = {l: i for i, l in enumerate(vocabs.labels)}
        n_tags, n_labels = len(vocabs.tags), len(vocabs.labels)
        d_repr = cfg.word_dim + d_lm + cfg.tag_dim
        self.d_repr = d_repr
        self.word_emb = Embedding(len(vocabs.words), cfg.word_dim, rng)
        self.tagger = MLP(cfg.word_dim + d_lm, cfg.tagger_hidden, n_tags, rng)
        self.tag_emb = Embedding(n_tags, cfg.tag_dim, rng)
        self.root = Parameter(rng.normal(0.0, 0.1, size=(1, d_repr)).astype(get_dtype()))
        self.arc_head = Linear(d_repr, cfg.arc_dim, rng)
        self.arc_dep = Linear(d_repr, cfg.arc_dim, rng)
        self.U_arc = Parameter(np.zeros((cfg.arc_dim, cfg.arc_dim)))
        self.u_arc = Parameter(np.zeros((cfg.arc_dim, 1)))
        self.lab_head = Linear(d_repr, cfg.label_dim, rng)
        self.lab_dep = Linear(d_repr, cfg.label_dim, rng)
        self.U_lab = Parameter(np.zeros((cfg.label_dim, n_labels, cfg.label_dim)))
        self.W_lab_head = Parameter(np.zeros((cfg.label_dim, n_labels)))
        self.W_lab_dep = Parameter(np.zeros((cfg.label_dim, n_labels)))
        self.b_lab = Parameter(np.zeros(n_labels))

    # ------------------------------------------------------------ inputs

    def word_ids(self, words: Sequence[str], rng: Optional[np.random.Generator] = None) -> np.ndarray:
        """Treebank word ids; with ``rng`` rare words are randomly replaced by UNK."""
        norm = str.lower if self.cfg.lowercase else (lambda w: w)
        ids = []
        for w in words:
            w = norm(w)
            i = self.word_index.get(w, 0)
            if (
                rng is not None
                and i
                and self.vocabs.word_counts.get(w, 0) <= self.cfg.word_min_count
                and rng.random() < self.cfg.unk_replace
            ):
                i = 0
            ids.append(i)
        return np.array(ids, dtype=np.int64)

    def _drop(self, x: Tensor, rng) -> Tensor:
        return ops.dropout(x, self.cfg.dropout, rng, self.training)

    def tag_logits(self, word_vecs: Tensor, lm: Tensor, rng=None) -> Tensor:
        """[n, |tags|] from concat(word embedding, lm vector)."""
        x = self._drop(ops.concat([word_vecs, lm], axis=-1), rng)
        return self.tagger(x, self.cfg.dropout, rng)

    def build_word_representation(self, word_vecs: Tensor, lm: Tensor, tag_ids: np.ndarray) -> Tensor:
        if not (word_vecs.shape[0] == lm.shape[0] == len(tag_ids)):
            raise ValueError(
                f"representation parts disagree in length: {word_vecs.shape[0]}, {lm.shape[0]}, {len(tag_ids)}"
            )
        return ops.concat([word_vecs, lm, self.tag_emb(tag_ids)], axis=-1)

    # ------------------------------------------------------------ scoring

    def biaffine_scores(self, reprs: Tensor, rng=None) -> tuple[Tensor, Tensor]:
        """Arc scores [(n+1), n] and label scores [(n+1), n, |labels|].

        Row j is the candidate head (0 = learned ROOT vector), column i-1 the
        dependent token i. Self-arcs are -inf.
        """
        n = reprs.shape[0]
        if n == 0:
            raise ValueError("biaffine_scores on an empty sentence")
        full = ops.concat([self.root, reprs], axis=0)
        hh = self._drop(ops.relu(self.arc_head(full)), rng)
        hd = self._drop(ops.relu(self.arc_dep(reprs)), rng)
        hd_t = ops.transpose(hd, (1, 0))
        arc = ops.matmul(ops.matmul(hh, self.U_arc), hd_t) + ops.matmul(hh, self.u_arc)
        ban = np.zeros((n + 1, n), dtype=reprs.data.dtype)
        ban[np.arange(1, n + 1), np.arange(n)] = -np.inf
        arc = arc + Tensor(ban)

        lh = self._drop(ops.relu(self.lab_head(full)), rng)
        ld = self._drop(ops.relu(self.lab_dep(reprs)), rng)
        b, n_labels = self.U_lab.shape[0], self.U_lab.shape[1]
        left = ops.reshape(ops.matmul(lh, ops.reshape(self.U_lab, (b, n_labels * b))), (n + 1, n_labels, b))
        bil = ops.transpose(ops.matmul(left, ops.transpose(ld, (1, 0))), (0, 2, 1))
        head_term = ops.reshape(ops.matmul(lh, self.W_lab_head), (n + 1, 1, n_labels))
        dep_term = ops.reshape(ops.matmul(ld, self.W_lab_dep), (1, n, n_labels))
        labels = bil + head_term + dep_term + self.b_lab
        return arc, labels

    # ------------------------------------------------------------ loss / decode

    def gold_ids(self, sentence: Sentence) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        heads = np.array(sentence.heads, dtype=np.int64)
        labels = np.array([self.label_index.get(l, -1) for l in sentence.deprels], dtype=np.int64)
        tags = np.array([self.tag_index.get(t, -1) for t in sentence.tags], dtype=np.int64)
        return heads, labels, tags

    def parse_loss(self, arc: Tensor, labels: Tensor, tag_logits: Tensor,
                   heads: np.ndarray, label_ids: np.ndarray, tag_ids: np.ndarray) -> Tensor:
        """CE(heads) + CE(gold-arc labels) + lambda_tag * CE(tags), each a token mean.

        Gold labels or tags outside the closed sets (-1) are left out.
        """
        n = arc.shape[1]
        heads = np.asarray(heads, dtype=np.int64)
        if heads.shape != (n,) or heads.min() < 0 or heads.max() > n:
            raise ValueError("gold head out of range")
        head_loss, _ = ops.cross_entropy(ops.transpose(arc, (1, 0)), heads)
        gold_arc_labels = ops.getitem(labels, (heads, np.arange(n)))
        label_ids = np.asarray(label_ids)
        lab_loss, _ = ops.cross_entropy(gold_arc_labels, np.maximum(label_ids, 0), label_ids >= 0)
        loss = head_loss + lab_loss
        if self.cfg.lambda_tag != 0.0:
            tag_ids = np.asarray(tag_ids)
            tag_loss, _ = ops.cross_entropy(tag_logits, np.maximum(tag_ids, 0), tag_ids >= 0)
            loss = loss + ops.scale(tag_loss, self.cfg.lambda_tag)
        return loss

    def forward(self, words: Sequence[str], lm: Tensor, gold: Optional[Sentence] = None, rng=None):
        """Run tagger and scorers for one sentence.

        With ``gold`` the gold tags feed the tag embeddings and the loss is
        returned; otherwise predicted tags are used.
        """
        if lm.shape[0] != len(words):
            raise ValueError(f"{lm.shape[0]} lm vectors for {len(words)} words")
        train_rng = rng if (gold is not None and self.training) else None
        wv = self.word_emb(self.word_ids(words, train_rng))
        tlog = self.tag_logits(wv, lm, rng)
        if gold is not None:
            heads, label_ids, tag_ids = self.gold_ids(gold)
            feed = np.where(tag_ids >= 0, tag_ids, np.argmax(tlog.data, axis=1))
        else:
            feed = np.argmax(tlog.data, axis=1)
        reprs = self._drop(self.build_word_representation(wv, lm, feed), rng)
        arc, labels = self.biaffine_scores(reprs, rng)
        loss = None
        if gold is not None:
            loss = self.parse_loss(arc, labels, tlog, heads, label_ids, tag_ids)
        return arc, labels, tlog, loss

    def decode(self, arc: Tensor, labels: Tensor, tlog: Tensor) -> ParseTree:
        tree = decode_tree(arc.data, labels.data, self.vocabs.labels)
        tree.tags = [self.vocabs.tags[i] for i in np.argmax(tlog.data, axis=1)]
        return tree


def decode_tree(arc: np.ndarray, labels: np.ndarray, label_names: Optional[Sequence[str]] = None) -> ParseTree:
    """Single-rooted maximum spanning tree plus the argmax label of each chosen arc."""
    heads = decode_heads(np.asarray(arc, dtype=np.float64))
    n = len(heads)
    label_ids = np.argmax(np.asarray(labels)[np.array(heads), np.arange(n)], axis=-1)
    names = [label_names[i] if label_names is not None else str(i) for i in label_ids]
    return ParseTree(heads, names, ["_"] * n)
