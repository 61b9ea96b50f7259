"""Closed-vocabulary subword baseline: BPE-trained pieces with WordPiece-style
``##`` continuations, greedy longest-match segmentation and word averaging."""

from __future__ import annotations

from collections import Counter
from typing import Iterable, Optional, Sequence

import numpy as np

from .autodiff import Embedding, Module, Tensor, ops
from .corpus import RawCorpus

CONT = "##"
SPECIALS = ("[CLS]", "[SEP]", "[MASK]", "[PAD]", "[UNK]")


class SubwordVocab:
    def __init__(self, pieces: Sequence[str]):
        if tuple(pieces[: len(SPECIALS)]) != SPECIALS:
            raise ValueError("subword vocabulary must start with the special pieces")
        self.itos = list(pieces)
        self.stoi = {p: i for i, p in enumerate(self.itos)}
        if len(self.stoi) != len(self.itos):
            raise ValueError("duplicate piece in subword vocabulary")
        self.unk_id = self.stoi["[UNK]"]

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, piece: str) -> bool:
        return piece in self.stoi

    def dumps(self) -> str:
        return "\n".join(self.itos) + "\n"

    @classmethod
    def loads(cls, text: str) -> "SubwordVocab":
        return cls(text.rstrip("\n").split("\n"))

    def __eq__(self, other) -> bool:
        return isinstance(other, SubwordVocab) and self.itos == other.itos


def base_alphabet(words: Iterable[str]) -> list[str]:
    """Every corpus character in both word-initial and continuation form."""
    chars = sorted({ch for w in words for ch in w})
    return sorted(chars + [CONT + ch for ch in chars])


def _join(a: str, b: str) -> str:
    return a + b[len(CONT):]


def train_subword_vocab(corpus: RawCorpus, size: int) -> SubwordVocab:
    """Greedy pair merging until the vocabulary reaches ``size`` pieces.

    The most frequent adjacent pair wins; frequency ties go to the
    lexicographically smallest pair. Pieces are ranked specials, base
    alphabet, then merges in order.
    """
    counts = Counter(corpus.words())
    if not counts:
        raise ValueError("empty corpus")
    alphabet = base_alphabet(counts)
    floor = len(alphabet) + len(SPECIALS)
    if size < floor:
        raise ValueError(f"size {size} is below characters + specials = {floor}")
    pieces = list(SPECIALS) + alphabet
    known = set(pieces)
    words = {w: [w[0]] + [CONT + c for c in w[1:]] for w in counts}
    while len(pieces) < size:
        pairs: Counter = Counter()
        for w, segs in words.items():
            c = counts[w]
            for a, b in zip(segs, segs[1:]):
                pairs[a, b] += c
        if not pairs:
            break
        best = min(pairs.items(), key=lambda kv: (-kv[1], kv[0]))[0]
        merged = _join(*best)
        for w, segs in words.items():
            if len(segs) < 2:
                continue
            out = []
            i = 0
            while i < len(segs):
                if i + 1 < len(segs) and segs[i] == best[0] and segs[i + 1] == best[1]:
                    out.append(merged)
                    i += 2
                else:
                    out.append(segs[i])
                    i += 1
            words[w] = out
        if merged not in known:
            known.add(merged)
            pieces.append(merged)
    return SubwordVocab(pieces)


def segment(word: str, vocab: SubwordVocab) -> list[int]:
    """Greedy longest-match-first; any uncoverable word becomes ``[UNK]``."""
    if word in vocab.stoi and word not in SPECIALS[:4]:
        return [vocab.stoi[word]]
    out = []
    start = 0
    while start < len(word):
        end = len(word)
        found = None
        while start < end:
            piece = word[start:end]
            if start > 0:
                piece = CONT + piece
            if piece in vocab.stoi:
                found = vocab.stoi[piece]
                break
            end -= 1
        if found is None:
            return [vocab.unk_id]
        out.append(found)
        start = end
    if not out:
        return [vocab.unk_id]
    return out


def segment_pieces(word: str, vocab: SubwordVocab) -> list[str]:
    return [vocab.itos[i] for i in segment(word, vocab)]


def averaging_matrix(groups: Sequence[int], n_pieces: int, dtype=np.float32) -> np.ndarray:
    """Row i averages the pieces of word i; ``groups[i]`` is its piece count."""
    if sum(groups) != n_pieces:
        raise ValueError(f"groups cover {sum(groups)} pieces, sequence has {n_pieces}")
    mat = np.zeros((len(groups), n_pieces), dtype=dtype)
    start = 0
    for i, g in enumerate(groups):
        if g < 1:
            raise ValueError(f"word {i} has no pieces")
        mat[i, start : start + g] = 1.0 / g
        start += g
    return mat


def average_pieces(vectors: Tensor, groups: Sequence[int]) -> Tensor:
    """Mean of each word's piece vectors; [n_pieces, d] -> [n_words, d]."""
    mat = Tensor(averaging_matrix(groups, vectors.shape[0], vectors.data.dtype))
    return ops.matmul(mat, vectors)


class SubwordEmbedder(Module):
    """Piece embedding table used as the input layer of the subword pipeline."""

    def __init__(self, vocab: SubwordVocab, d_model: int, rng: np.random.Generator):
        self.vocab = vocab
        self.table = Embedding(len(vocab), d_model, rng, scale=1.0)

    def embed_words(self, pieces: Sequence[str]) -> Tensor:
        ids = np.array([self.vocab.stoi.get(p, self.vocab.unk_id) for p in pieces], dtype=np.int64)
        return self.table(ids)

    def split(self, words: Sequence[str]) -> tuple[list[str], list[int]]:
        """Pieces for a word sequence plus the per-word piece counts."""
        pieces: list[str] = []
        groups: list[int] = []
        for w in words:
            seg = segment_pieces(w, self.vocab)
            pieces.extend(seg)
            groups.append(len(seg))
        return pieces, groups


def unk_rate(words: Iterable[str], vocab: SubwordVocab) -> float:
    words = list(words)
    if not words:
        raise ValueError("no words")
    return sum(1 for w in words if segment(w, vocab) == [vocab.unk_id]) / len(words)


def mean_pieces(words: Iterable[str], vocab: SubwordVocab) -> float:
    words = list(words)
    if not words:
        raise ValueError("no words")
    return sum(len(segment(w, vocab)) for w in words) / len(words)
