"""Tensors, parameters and the reverse-mode tape."""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Iterator, Optional, Sequence

import numpy as np

_DTYPES = {"f32": np.float32, "f64": np.float64}
_dtype = np.float32
_debug = False
# Stack of active tapes; ``None`` entries come from ``no_grad`` and suppress recording.
_tapes: list[Optional["Tape"]] = []


def get_dtype() -> type:
    return _dtype


@contextlib.contextmanager
def precision(mode: str) -> Iterator[None]:
    """Temporarily switch the dtype used for new tensors ("f32" or "f64")."""
    global _dtype
    old = _dtype
    _dtype = _DTYPES[mode]
    try:
        yield
    finally:
        _dtype = old


def set_debug(flag: bool) -> None:
    """When on, every recorded op checks its output for NaN/Inf."""
    global _debug
    _debug = flag


class Tensor:
    __slots__ = ("data", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(_dtype)
        self.data = arr
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype})"

    # operator sugar, defined in ops to avoid a cycle
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from . import ops
        return ops.scale(self, -1.0)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def __getitem__(self, index):
        from . import ops
        return ops.getitem(self, index)


class Parameter(Tensor):
    """A named trainable tensor with its own gradient slot."""

    __slots__ = ("name", "grad")

    def __init__(self, data, name: str = ""):
        super().__init__(np.array(data, dtype=_dtype), requires_grad=True)
        self.name = name
        self.grad = np.zeros_like(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=_dtype))


@dataclass
class Node:
    out: Tensor
    inputs: tuple[Tensor, ...]
    vjp: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


@dataclass
class Tape:
    """Records differentiable operations in execution (hence topological) order.

    Use as a context manager; ops executed inside are recorded when at least
    one input requires a gradient.
    """

    nodes: list[Node] = field(default_factory=list)
    consumed: bool = False

    def __enter__(self) -> "Tape":
        _tapes.append(self)
        return self

    def __exit__(self, *exc) -> None:
        popped = _tapes.pop()
        assert popped is self


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    _tapes.append(None)
    try:
        yield
    finally:
        _tapes.pop()


def recording() -> bool:
    return bool(_tapes) and _tapes[-1] is not None


def record(out: Tensor, inputs: Sequence[Tensor], vjp) -> Tensor:
    """Attach ``out`` to the active tape if any input needs a gradient."""
    if _debug and all(np.all(np.isfinite(t.data)) for t in inputs):
        if not np.all(np.isfinite(out.data)):
            raise FloatingPointError("non-finite output from finite inputs")
    if not _tapes or _tapes[-1] is None:
        return out
    if any(t.requires_grad for t in inputs):
        out.requires_grad = True
        _tapes[-1].nodes.append(Node(out, tuple(inputs), vjp))
    return out


def backward(tape: Tape, loss: Tensor) -> None:
    """Accumulate d(loss)/d(p) into ``p.grad`` for every parameter reachable on ``tape``."""
    if loss.data.size != 1:
        raise ValueError(f"loss must be a scalar, got shape {loss.shape}")
    if tape.consumed:
        raise RuntimeError("tape already consumed by a previous backward pass")
    if isinstance(loss, Parameter):
        loss.grad += np.ones_like(loss.data)
        tape.consumed = True
        return
    if not any(node.out is loss for node in reversed(tape.nodes)):
        raise ValueError("loss was not produced on this tape")
    tape.consumed = True
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.out), None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.vjp(g)):
            if gi is None or not inp.requires_grad:
                continue
            if isinstance(inp, Parameter):
                inp.grad += gi
            else:
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
    tape.nodes.clear()
