"""Character-level word encoder: char embeddings, multi-width CNN, highway, projection.

Every word, whatever its spelling, gets its own context-independent vector,
so there is no word-level unknown token on the input side.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence, Union

import numpy as np

from .autodiff import Linear, Module, Parameter, Tensor, ops
from .autodiff.nn import init_uniform
from .autodiff.tape import get_dtype

SPECIAL_WORDS = ("[CLS]", "[SEP]", "[MASK]", "[PAD]", "[UNK]")
RESERVED = ("[PAD_CHAR]", "[BOW]", "[EOW]", "[UNK_CHAR]") + SPECIAL_WORDS
PAD_CHAR, BOW, EOW, UNK_CHAR = 0, 1, 2, 3


class CharVocab:
    """Open character inventory; reserved ids come first, then corpus characters by code point."""

    def __init__(self, chars: Iterable[str] = ()):
        self.itos: list[str] = list(RESERVED)
        self.stoi: dict[str, int] = {}
        for ch in sorted(set(chars)):
            if len(ch) != 1:
                raise ValueError(f"not a single character: {ch!r}")
            self.stoi[ch] = len(self.itos)
            self.itos.append(ch)
        self.special_ids = {w: RESERVED.index(w) for w in SPECIAL_WORDS}

    @classmethod
    def build(cls, words: Iterable[str], min_count: int = 1) -> "CharVocab":
        counts = Counter(ch for w in words for ch in w)
        return cls(ch for ch, c in counts.items() if c >= min_count)

    def __len__(self) -> int:
        return len(self.itos)

    def char_id(self, ch: str) -> int:
        return self.stoi.get(ch, UNK_CHAR)

    def dumps(self) -> str:
        lines = list(RESERVED) + [f"U+{ord(ch):04X}" for ch in self.itos[len(RESERVED):]]
        return "\n".join(lines) + "\n"

    @classmethod
    def loads(cls, text: str) -> "CharVocab":
        lines = text.rstrip("\n").split("\n")
        if tuple(lines[: len(RESERVED)]) != RESERVED:
            raise ValueError("char vocabulary file does not start with the reserved entries")
        chars = [chr(int(line[2:], 16)) for line in lines[len(RESERVED):]]
        vocab = cls(chars)
        if vocab.itos[len(RESERVED):] != chars:
            raise ValueError("char vocabulary file is not in code-point order")
        return vocab

    def __eq__(self, other) -> bool:
        return isinstance(other, CharVocab) and self.itos == other.itos


@dataclass
class CharEncoderConfig:
    char_emb_dim: int = 16
    kernels: list = field(default_factory=lambda: [[1, 16], [2, 16], [3, 32], [4, 32], [5, 32]])
    n_highway: int = 2
    d_model: int = 128
    max_word_len: int = 50
    conv_activation: str = "tanh"

    def __post_init__(self):
        self.kernels = [[int(w), int(f)] for w, f in self.kernels]
        for w, _ in self.kernels:
            if w > self.max_word_len + 2:
                raise ValueError(f"kernel width {w} exceeds max_word_len + 2")
        if self.conv_activation not in ops.ACTIVATIONS:
            raise ValueError(f"unknown activation {self.conv_activation!r}")


def encode_chars(word: str, vocab: CharVocab, max_word_len: int) -> np.ndarray:
    """[BOW] + chars (truncated) + [EOW], right-padded with PAD_CHAR to max_word_len + 2."""
    out = np.full(max_word_len + 2, PAD_CHAR, dtype=np.int64)
    out[0] = BOW
    if word in vocab.special_ids:
        ids = [vocab.special_ids[word]]
    else:
        ids = [vocab.char_id(ch) for ch in word[:max_word_len]]
    out[1 : 1 + len(ids)] = ids
    out[1 + len(ids)] = EOW
    return out


def encode_batch(words: Sequence[str], vocab: CharVocab, max_word_len: int) -> np.ndarray:
    if not words:
        return np.zeros((0, max_word_len + 2), dtype=np.int64)
    return np.stack([encode_chars(w, vocab, max_word_len) for w in words])


class Highway(Module):
    """y = t * relu(W_h x + b_h) + (1 - t) * x with t = sigmoid(W_t x + b_t)."""

    def __init__(self, d: int, rng: np.random.Generator):
        self.transform = Linear(d, d, rng)
        self.gate = Linear(d, d, rng)
        # start close to carrying the input through
        self.gate.b.data[:] = -1.0

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.transform.W.shape[0]:
            raise ValueError(f"highway: input dim {x.shape[-1]} != {self.transform.W.shape[0]}")
        t = ops.sigmoid(self.gate(x))
        h = ops.relu(self.transform(x))
        return t * h + (1.0 - t) * x


def highway(x: Tensor, layers: Sequence[Highway]) -> Tensor:
    for layer in layers:
        x = layer(x)
    return x


class CharEncoder(Module):
    def __init__(self, cfg: CharEncoderConfig, vocab: CharVocab, rng: np.random.Generator):
        self.cfg = cfg
        self.vocab = vocab
        self.char_emb = Parameter(rng.normal(0.0, 1.0, size=(len(vocab), cfg.char_emb_dim)).astype(get_dtype()))
        for k, (width, filters) in enumerate(cfg.kernels):
            fan_in = width * cfg.char_emb_dim
            setattr(self, f"conv{k}_W", Parameter(init_uniform(rng, (width, cfg.char_emb_dim, filters), fan_in)))
            setattr(self, f"conv{k}_b", Parameter(np.zeros(filters)))
        n_filters = sum(f for _, f in cfg.kernels)
        self.n_filters = n_filters
        for k in range(cfg.n_highway):
            setattr(self, f"highway{k}", Highway(n_filters, rng))
        self.proj = Linear(n_filters, cfg.d_model, rng)

    @property
    def highways(self) -> list[Highway]:
        return [getattr(self, f"highway{k}") for k in range(self.cfg.n_highway)]

    def embed_ids(self, char_ids: np.ndarray) -> Tensor:
        """char id batch [n_words, max_word_len + 2] -> [n_words, d_model]."""
        if char_ids.ndim != 2 or char_ids.shape[1] != self.cfg.max_word_len + 2:
            raise ValueError(f"char id batch has shape {char_ids.shape}, expected [n, {self.cfg.max_word_len + 2}]")
        act = ops.ACTIVATIONS[self.cfg.conv_activation]
        x = ops.embedding(self.char_emb, char_ids)
        # Pool only over windows starting inside [BOW .. EOW]. Windows made of
        # padding alone are identical for every word and would otherwise let
        # filters settle on a word-independent constant.
        span = (char_ids != PAD_CHAR).sum(axis=1)
        pooled = []
        for k, (width, _) in enumerate(self.cfg.kernels):
            conv = ops.conv1d(x, getattr(self, f"conv{k}_W"), getattr(self, f"conv{k}_b"))
            starts = np.arange(conv.shape[1])
            valid = (starts[None, :] < np.maximum(span, 1)[:, None])[:, :, None]
            pooled.append(ops.max_over_time(act(conv), axis=1, valid=valid))
        h = ops.concat(pooled, axis=-1) if len(pooled) > 1 else pooled[0]
        h = highway(h, self.highways)
        return self.proj(h)

    def embed_words(self, words: Sequence[str]) -> Tensor:
        """Embed each word; repeated words are encoded once and gathered."""
        uniq: dict[str, int] = {}
        index = np.array([uniq.setdefault(w, len(uniq)) for w in words], dtype=np.int64)
        table = self.embed_ids(encode_batch(list(uniq), self.vocab, self.cfg.max_word_len))
        if len(uniq) == len(words) and np.array_equal(index, np.arange(len(words))):
            return table
        return ops.getitem(table, index)
