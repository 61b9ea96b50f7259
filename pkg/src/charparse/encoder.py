"""Transformer encoder, layer aggregation strategies and the masked-LM head."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .autodiff import LayerNorm, Linear, Module, Parameter, Tensor, ops
from .autodiff.tape import get_dtype

MASK_NEG = -1e9
# Transformer and MLM-head weights start small so that attention is close to
# uniform and the output close to the uniform distribution at step 0.
INIT_STD = 0.02
SPECIAL_TOKENS = frozenset(("[CLS]", "[SEP]", "[MASK]", "[PAD]", "[UNK]"))


class SequenceTooLong(ValueError):
    pass


@dataclass
class EncoderConfig:
    n_layers: int = 4
    n_heads: int = 4
    d_model: int = 128
    d_ff: int = 512
    max_seq_len: int = 128
    dropout: float = 0.1
    source: str = "character"

    def __post_init__(self):
        if self.n_layers < 1:
            raise ValueError("n_layers must be >= 1")
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.source not in ("character", "subword"):
            raise ValueError(f"unknown embedding source {self.source!r}")


class SelfAttention(Module):
    def __init__(self, d: int, n_heads: int, rng: np.random.Generator):
        self.n_heads = n_heads
        self.Wq = Linear(d, d, rng, init_std=INIT_STD)
        self.Wk = Linear(d, d, rng, bias=False, init_std=INIT_STD)  # a key bias cannot change attention weights
        self.Wv = Linear(d, d, rng, init_std=INIT_STD)
        self.Wo = Linear(d, d, rng, init_std=INIT_STD)
        self.last_weights: Optional[np.ndarray] = None

    def __call__(self, x: Tensor, mask_add: np.ndarray) -> Tensor:
        b, t, d = x.shape
        h = self.n_heads
        dh = d // h

        def heads(z: Tensor) -> Tensor:
            return ops.transpose(ops.reshape(z, (b, t, h, dh)), (0, 2, 1, 3))

        q = heads(self.Wq(x))
        k = ops.transpose(ops.reshape(self.Wk(x), (b, t, h, dh)), (0, 2, 3, 1))
        v = heads(self.Wv(x))
        scores = ops.scale(ops.matmul(q, k), 1.0 / math.sqrt(dh))
        scores = scores + Tensor(mask_add.astype(x.data.dtype))
        attn = ops.softmax(scores, axis=-1)
        self.last_weights = attn.data
        ctx = ops.reshape(ops.transpose(ops.matmul(attn, v), (0, 2, 1, 3)), (b, t, d))
        return self.Wo(ctx)


class Block(Module):
    """Post-norm transformer block: attention, add & norm, gelu FFN, add & norm."""

    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        self.attn = SelfAttention(cfg.d_model, cfg.n_heads, rng)
        self.norm1 = LayerNorm(cfg.d_model)
        self.ff1 = Linear(cfg.d_model, cfg.d_ff, rng, init_std=INIT_STD)
        self.ff2 = Linear(cfg.d_ff, cfg.d_model, rng, init_std=INIT_STD)
        self.norm2 = LayerNorm(cfg.d_model)
        self.p = cfg.dropout

    def __call__(self, x: Tensor, mask_add: np.ndarray, rng) -> Tensor:
        a = ops.dropout(self.attn(x, mask_add), self.p, rng, self.training)
        x = self.norm1(x + a)
        f = self.ff2(ops.gelu(self.ff1(x)))
        f = ops.dropout(f, self.p, rng, self.training)
        return self.norm2(x + f)


@dataclass
class EncoderOutput:
    hidden: list[Tensor]
    mask: np.ndarray  # [batch, positions], True for real positions

    @property
    def n_layers(self) -> int:
        return len(self.hidden)


def sinusoid_table(n: int, d: int) -> np.ndarray:
    """Sine/cosine position codes, used to initialise the learned position table.

    Offsets between positions become fixed rotations, so attention to a
    neighbour at a given distance is a linear function of the codes from the
    first step on. The table is trained like any other parameter.
    """
    pos = np.arange(n)[:, None]
    rate = np.exp(-math.log(10000.0) * (np.arange(0, d, 2) / d))
    table = np.zeros((n, d))
    table[:, 0::2] = np.sin(pos * rate)
    table[:, 1::2] = np.cos(pos * rate[: d // 2])
    return table


class TransformerEncoder(Module):
    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.pos = Parameter(sinusoid_table(cfg.max_seq_len, cfg.d_model).astype(get_dtype()))
        for j in range(cfg.n_layers):
            setattr(self, f"layer{j}", Block(cfg, rng))
        self.emb_norm = LayerNorm(cfg.d_model)

    @property
    def blocks(self) -> list[Block]:
        return [getattr(self, f"layer{j}") for j in range(self.cfg.n_layers)]

    def __call__(self, embeddings: Tensor, mask: Optional[np.ndarray] = None, rng=None) -> EncoderOutput:
        """embeddings [batch, n, d] (or [n, d]); mask [batch, n] marks real positions."""
        squeeze = embeddings.ndim == 2
        if squeeze:
            embeddings = ops.reshape(embeddings, (1,) + embeddings.shape)
        b, n, d = embeddings.shape
        if d != self.cfg.d_model:
            raise ValueError(f"encoder: embedding dim {d} != d_model {self.cfg.d_model}")
        if n > self.cfg.max_seq_len:
            raise SequenceTooLong(f"sequence of {n} positions exceeds max_seq_len {self.cfg.max_seq_len}")
        if mask is None:
            mask = np.ones((b, n), dtype=bool)
        mask = np.asarray(mask, dtype=bool).reshape(b, n)
        mask_add = np.where(mask, 0.0, MASK_NEG)[:, None, None, :]
        x = self.emb_norm(embeddings + ops.getitem(self.pos, slice(0, n)))
        x = ops.dropout(x, self.cfg.dropout, rng, self.training)
        hidden = []
        for block in self.blocks:
            x = block(x, mask_add, rng)
            hidden.append(ops.reshape(x, (n, d)) if squeeze else x)
        return EncoderOutput(hidden, mask)


# ---------------------------------------------------------------- aggregation

MODES = ("last_layer", "mean", "scalar_mix")


@dataclass(frozen=True)
class AggregationSpec:
    layers: tuple[int, ...] = ()  # empty means "all"
    mode: str = "last_layer"
    trainable: bool = True

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown aggregation mode {self.mode!r}")

    def resolve(self, n_layers: int) -> tuple[int, ...]:
        if self.mode == "last_layer":
            if self.layers and tuple(self.layers) != (n_layers - 1,):
                raise ValueError(f"last_layer aggregation uses layer {n_layers - 1} only")
            return (n_layers - 1,)
        layers = tuple(self.layers) if self.layers else tuple(range(n_layers))
        for j in layers:
            if not 0 <= j < n_layers:
                raise ValueError(f"layer index {j} out of range for {n_layers} layers")
        return layers

    @property
    def label(self) -> str:
        name = self.mode.replace("_", "-")
        return f"{name}-{'ft' if self.trainable else 'fz'}"


def parse_layers(text: str, n_layers: int) -> tuple[int, ...]:
    """'j', 'a-b' (inclusive) or 'all'."""
    text = text.strip()
    if text == "all":
        return tuple(range(n_layers))
    try:
        if "-" in text:
            a, b = (int(x) for x in text.split("-", 1))
            layers = tuple(range(a, b + 1))
        else:
            layers = (int(text),)
    except ValueError:
        raise ValueError(f"cannot parse layer selection {text!r}") from None
    if not layers or any(not 0 <= j < n_layers for j in layers):
        raise ValueError(f"layer selection {text!r} out of range for {n_layers} layers")
    return layers


class ScalarMix(Module):
    """gamma * sum_j softmax(s)_j h_j over the selected layers."""

    def __init__(self, n: int):
        self.s = Parameter(np.zeros(n))
        self.gamma = Parameter(np.ones(1))

    def weights(self) -> np.ndarray:
        z = self.s.data - self.s.data.max()
        e = np.exp(z)
        return e / e.sum()

    def __call__(self, tensors: Sequence[Tensor]) -> Tensor:
        if len(tensors) != self.s.shape[0]:
            raise ValueError(f"scalar mix over {self.s.shape[0]} layers got {len(tensors)}")
        w = ops.softmax(self.s, axis=0)
        stacked = ops.stack(tensors, axis=0)
        w = ops.reshape(w, (len(tensors),) + (1,) * tensors[0].ndim)
        mixed = ops.sum(w * stacked, axis=0)
        return mixed * self.gamma


def aggregate(out: EncoderOutput, spec: AggregationSpec, mix: Optional[ScalarMix] = None) -> Tensor:
    layers = spec.resolve(out.n_layers)
    hidden = [out.hidden[j] for j in layers]
    if not spec.trainable:
        hidden = [ops.detach(h) for h in hidden]
    if spec.mode == "last_layer":
        return hidden[0]
    if spec.mode == "mean":
        if len(hidden) == 1:
            return hidden[0]
        total = hidden[0]
        for h in hidden[1:]:
            total = total + h
        return ops.scale(total, 1.0 / len(hidden))
    if mix is None:
        raise ValueError("scalar_mix aggregation needs a ScalarMix module")
    return mix(hidden)


# ---------------------------------------------------------------- masked LM


class MlmHead(Module):
    """Projection onto a closed output vocabulary; the last entry is ``[UNK]``."""

    def __init__(self, vocab: Sequence[str], d_model: int, rng: np.random.Generator,
                 mask_rate: float = 0.15, split: Sequence[float] = (0.8, 0.1, 0.1)):
        vocab = list(vocab)
        if not vocab:
            raise ValueError("MLM output vocabulary needs at least one word")
        if abs(sum(split) - 1.0) > 1e-9 or len(split) != 3:
            raise ValueError("mask/random/keep split must have three parts summing to 1")
        if "[UNK]" in vocab:
            vocab.remove("[UNK]")
        self.vocab = vocab + ["[UNK]"]
        self.index = {w: i for i, w in enumerate(self.vocab)}
        self.mask_rate = mask_rate
        self.split = tuple(split)
        self.proj = Linear(d_model, len(self.vocab), rng, init_std=INIT_STD)

    @property
    def unk_id(self) -> int:
        return len(self.vocab) - 1

    def target_id(self, word: str) -> int:
        """Index of ``word`` or -1 when it is outside the prediction vocabulary."""
        i = self.index.get(word, -1)
        return -1 if i == self.unk_id else i

    def __call__(self, h: Tensor) -> Tensor:
        return self.proj(h)


@dataclass
class MaskedSequence:
    tokens: list[str]
    targets: np.ndarray  # per position, -1 where no loss is taken
    selected: list[int]

    @property
    def loss_positions(self) -> list[int]:
        return [int(i) for i in np.flatnonzero(self.targets >= 0)]


def mlm_mask(tokens: Sequence[str], head: MlmHead, rng: np.random.Generator) -> MaskedSequence:
    """Select ~mask_rate of the non-special positions and corrupt them.

    Selected positions become [MASK], a random in-vocabulary word, or stay
    unchanged according to ``head.split``. Only selected positions whose
    true word is in the output vocabulary carry a loss.
    """
    tokens = list(tokens)
    n = len(tokens)
    targets = np.full(n, -1, dtype=np.int64)
    if head.mask_rate <= 0.0:
        return MaskedSequence(tokens, targets, [])
    draws = rng.random(n)
    kinds = rng.random(n)
    randoms = rng.integers(0, max(head.unk_id, 1), size=n)
    out = list(tokens)
    selected = []
    p_mask, p_rand, _ = head.split
    for i, tok in enumerate(tokens):
        if tok in SPECIAL_TOKENS or draws[i] >= head.mask_rate:
            continue
        selected.append(i)
        if kinds[i] < p_mask:
            out[i] = "[MASK]"
        elif kinds[i] < p_mask + p_rand and head.unk_id > 0:
            out[i] = head.vocab[randoms[i]]
        targets[i] = head.target_id(tok)
    return MaskedSequence(out, targets, selected)


@dataclass
class MlmResult:
    loss: Tensor
    count: int

    @property
    def log_likelihood(self) -> float:
        """Mean per-token log-likelihood of the scored positions."""
        return -float(self.loss.data) if self.count else 0.0


def mlm_loss(out: EncoderOutput, targets: np.ndarray, head: MlmHead) -> MlmResult:
    """Mean cross-entropy at positions with ``targets >= 0`` (last layer)."""
    h = out.hidden[-1]
    d = h.shape[-1]
    flat = ops.reshape(h, (-1, d))
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    if targets.shape[0] != flat.shape[0]:
        raise ValueError(f"{targets.shape[0]} targets for {flat.shape[0]} positions")
    if targets.size and targets.max() >= len(head.vocab):
        raise IndexError("MLM target id out of range")
    rows = np.flatnonzero(targets >= 0)
    if rows.size == 0:
        return MlmResult(Tensor(np.zeros((), dtype=h.data.dtype)), 0)
    logits = head(ops.getitem(flat, rows))
    loss, count = ops.cross_entropy(logits, targets[rows])
    return MlmResult(loss, count)
