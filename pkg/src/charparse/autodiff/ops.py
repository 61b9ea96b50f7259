"""Differentiable primitives.

Every function takes and returns :class:`Tensor` objects and registers a
vector-Jacobian product on the active tape.
"""

from __future__ import annotations

import math
from typing import Optional, Sequence

import numpy as np

from .tape import Tensor, as_tensor, record


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _check_broadcast(name: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{name}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- arithmetic


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a, b)
    out = Tensor(a.data + b.data)
    return record(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a, b)
    out = Tensor(a.data - b.data)
    return record(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a, b)
    out = Tensor(a.data * b.data)
    return record(
        out,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def scale(a: Tensor, c: float) -> Tensor:
    out = Tensor(a.data * a.data.dtype.type(c))
    return record(out, (a,), lambda g: (g * c,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with numpy batching semantics (both operands at least 2-D)."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    out = Tensor(np.matmul(a.data, b.data))

    def vjp(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2)) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            if b.ndim == 2 and a.ndim > 2:
                k = a.shape[-1]
                gb = a.data.reshape(-1, k).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        if ga is not None:
            ga = _unbroadcast(ga, a.shape)
        return ga, gb

    return record(out, (a, b), vjp)


def bmm(a: Tensor, b: Tensor) -> Tensor:
    """Batched matmul; both operands must share their leading batch dimensions."""
    if a.ndim < 3 or a.shape[:-2] != b.shape[:-2]:
        raise ValueError(f"bmm: incompatible shapes {a.shape} and {b.shape}")
    return matmul(a, b)


# ---------------------------------------------------------------- shape ops


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    out = Tensor(a.data.reshape(shape))
    return record(out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    out = Tensor(np.transpose(a.data, axes))
    return record(out, (a,), lambda g: (np.transpose(g, inverse),))


def getitem(a: Tensor, index) -> Tensor:
    out = Tensor(np.array(a.data[index]))

    def vjp(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return record(out, (a,), vjp)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    except ValueError:
        shapes = [t.shape for t in tensors]
        raise ValueError(f"concat: incompatible shapes {shapes} on axis {axis}") from None
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    return record(out, tensors, lambda g: tuple(np.split(g, splits, axis=axis)))


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = Tensor(np.stack([t.data for t in tensors], axis=axis))
    return record(
        out, tensors, lambda g: tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))
    )


def embedding(weight: Tensor, ids: np.ndarray) -> Tensor:
    """Row gather ``weight[ids]`` for an integer index array of any shape."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= weight.shape[0]):
        raise IndexError(f"embedding: id out of range for table of {weight.shape[0]} rows")
    out = Tensor(weight.data[ids])

    def vjp(g):
        full = np.zeros_like(weight.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, weight.shape[1]))
        return (full,)

    return record(out, (weight,), vjp)


def detach(a: Tensor) -> Tensor:
    return Tensor(a.data)


# ---------------------------------------------------------------- reductions


def sum(a: Tensor, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = Tensor(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)))

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return record(out, (a,), vjp)


def mean(a: Tensor, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else a.shape[axis]
    return scale(sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def max_over_time(x: Tensor, axis: int = 1, valid: Optional[np.ndarray] = None) -> Tensor:
    """Max pooling over ``axis``; the gradient goes to the first maximal position.

    ``valid`` (broadcastable to ``x``) excludes positions from the max; every
    pooled slice must keep at least one valid position.
    """
    data = x.data if valid is None else np.where(valid, x.data, -np.inf)
    idx = np.argmax(data, axis=axis)
    out = Tensor(np.take_along_axis(x.data, np.expand_dims(idx, axis), axis=axis).squeeze(axis))

    def vjp(g):
        full = np.zeros_like(x.data)
        np.put_along_axis(full, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis=axis)
        return (full,)

    return record(out, (x,), vjp)


# ---------------------------------------------------------------- convolution


def conv1d(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Valid 1-D convolution over the time axis.

    x: [N, T, C], w: [width, C, F], b: [F] -> [N, T - width + 1, F]
    """
    n, t, c = x.shape
    width, c2, f = w.shape
    if c != c2 or width > t or b.shape != (f,):
        raise ValueError(f"conv1d: incompatible shapes x={x.shape} w={w.shape} b={b.shape}")
    t_out = t - width + 1
    windows = np.stack([x.data[:, k : k + t_out] for k in range(width)], axis=2)
    cols = windows.reshape(n * t_out, width * c)
    w2 = w.data.reshape(width * c, f)
    out = Tensor((cols @ w2 + b.data).reshape(n, t_out, f))

    def vjp(g):
        g2 = g.reshape(n * t_out, f)
        gw = (cols.T @ g2).reshape(w.shape) if w.requires_grad else None
        gb = g2.sum(axis=0) if b.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (g2 @ w2.T).reshape(n, t_out, width, c)
            gx = np.zeros_like(x.data)
            for k in range(width):
                gx[:, k : k + t_out] += gcols[:, :, k]
        return gx, gw, gb

    return record(out, (x, w, b), vjp)


# ---------------------------------------------------------------- activations


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    out = Tensor(np.where(mask, a.data, 0).astype(a.data.dtype))
    return record(out, (a,), lambda g: (g * mask,))


def sigmoid(a: Tensor) -> Tensor:
    s = 0.5 * (np.tanh(0.5 * a.data) + 1.0)
    out = Tensor(s.astype(a.data.dtype))
    return record(out, (a,), lambda g: (g * s * (1.0 - s),))


def tanh(a: Tensor) -> Tensor:
    t = np.tanh(a.data)
    out = Tensor(t)
    return record(out, (a,), lambda g: (g * (1.0 - t * t),))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    """Tanh approximation of GELU."""
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x**3)
    t = np.tanh(inner)
    out = Tensor((0.5 * x * (1.0 + t)).astype(x.dtype))

    def vjp(g):
        d_inner = _GELU_C * (1.0 + 3 * 0.044715 * x**2)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner),)

    return record(out, (a,), vjp)


def identity(a: Tensor) -> Tensor:
    return a


ACTIVATIONS = {"tanh": tanh, "relu": relu, "gelu": gelu, "sigmoid": sigmoid, "identity": identity}


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(s)
    return record(out, (a,), lambda g: (s * (g - (g * s).sum(axis=axis, keepdims=True)),))


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    m = a.data.max(axis=axis, keepdims=True)
    z = a.data - m
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    ls = z - lse
    out = Tensor(ls)

    def vjp(g):
        s = np.exp(ls)
        return (g - s * g.sum(axis=axis, keepdims=True),)

    return record(out, (a,), vjp)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis; rows with variance < 1e-12 normalise to 0."""
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = np.where(var < 1e-12, 0.0, 1.0 / np.sqrt(var + eps)).astype(x.data.dtype)
    xhat = xc * inv
    out = Tensor(xhat * gamma.data + beta.data)

    def vjp(g):
        gx = None
        if x.requires_grad:
            gh = g * gamma.data
            gx = inv * (
                gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True)
            )
        return gx, _unbroadcast(g * xhat, gamma.shape), _unbroadcast(g, beta.shape)

    return record(out, (x, gamma, beta), vjp)


def dropout(a: Tensor, p: float, rng: Optional[np.random.Generator], train: bool) -> Tensor:
    """Inverted dropout; identity when not training or ``p == 0``."""
    if not train or p <= 0.0:
        return a
    if rng is None:
        raise ValueError("dropout in train mode needs an rng")
    keep = (rng.random(a.shape) >= p).astype(a.data.dtype) / (1.0 - p)
    out = Tensor(a.data * keep)
    return record(out, (a,), lambda g: (g * keep,))


# ---------------------------------------------------------------- losses


def cross_entropy(
    logits: Tensor, targets: np.ndarray, mask: Optional[np.ndarray] = None
) -> tuple[Tensor, int]:
    """Mean negative log-likelihood over rows where ``mask`` is true.

    logits: [M, K]; targets: [M] ints. Returns (loss, count); loss is 0 when
    no row is selected.
    """
    targets = np.asarray(targets, dtype=np.int64)
    m, k = logits.shape
    if mask is None:
        mask = np.ones(m, dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    rows = np.flatnonzero(mask)
    if rows.size and (targets[rows].min() < 0 or targets[rows].max() >= k):
        raise IndexError(f"cross_entropy: target id out of range for {k} classes")
    count = int(rows.size)
    if count == 0:
        return Tensor(np.zeros((), dtype=logits.data.dtype)), 0
    ls = log_softmax(logits, axis=-1)
    picked = getitem(ls, (rows, targets[rows]))
    return scale(sum(picked), -1.0 / count), count
