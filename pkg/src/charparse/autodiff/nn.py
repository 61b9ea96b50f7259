"""Module container and a few standard layers."""

from __future__ import annotations

from typing import Iterator, Optional

import numpy as np

from . import ops
from .tape import Parameter, Tensor, get_dtype


class Module:
    """Base class: parameters and submodules are discovered from attributes.

    Parameter names are dotted attribute paths (``encoder.layer3.attn.Wq``),
    in attribute definition order.
    """

    training: bool = True

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for attr, value in vars(self).items():
            path = f"{prefix}{attr}"
            if isinstance(value, Parameter):
                yield path, value
            elif isinstance(value, Module):
                yield from value.named_parameters(path + ".")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def modules(self) -> Iterator["Module"]:
        yield self
        for value in vars(self).values():
            if isinstance(value, Module):
                yield from value.modules()

    def assign_names(self, prefix: str = "") -> None:
        for name, p in self.named_parameters(prefix):
            p.name = name

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def astype(self, dtype) -> "Module":
        """Cast all parameters in place (used to switch into f64 for gradient checks)."""
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = np.zeros_like(p.data)
        return self


def init_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(max(fan_in, 1))
    return rng.uniform(-bound, bound, size=shape).astype(get_dtype())


def init_xavier(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape).astype(get_dtype())


class Linear(Module):
    """y = x W + b. Xavier-uniform weights unless ``init_std`` asks for N(0, init_std)."""

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True,
                 init_std: Optional[float] = None):
        if init_std is None:
            w = init_xavier(rng, (d_in, d_out), d_in, d_out)
        else:
            w = rng.normal(0.0, init_std, size=(d_in, d_out)).astype(get_dtype())
        self.W = Parameter(w)
        self.b = Parameter(np.zeros(d_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.W.shape[0]:
            raise ValueError(f"Linear: input dim {x.shape[-1]} != {self.W.shape[0]}")
        y = ops.matmul(x, self.W)
        return y + self.b if self.b is not None else y


class Embedding(Module):
    def __init__(self, n: int, d: int, rng: np.random.Generator, scale: float = 0.1):
        self.weight = Parameter(rng.normal(0.0, scale, size=(n, d)).astype(get_dtype()))

    def __call__(self, ids: np.ndarray) -> Tensor:
        return ops.embedding(self.weight, ids)


class LayerNorm(Module):
    def __init__(self, d: int):
        self.gamma = Parameter(np.ones(d))
        self.beta = Parameter(np.zeros(d))

    def __call__(self, x: Tensor) -> Tensor:
        return ops.layer_norm(x, self.gamma, self.beta)


class MLP(Module):
    """One hidden layer with relu, linear output."""

    def __init__(self, d_in: int, d_hidden: int, d_out: int, rng: np.random.Generator):
        self.hidden = Linear(d_in, d_hidden, rng)
        self.out = Linear(d_hidden, d_out, rng)

    def __call__(self, x: Tensor, dropout: float = 0.0, rng=None) -> Tensor:
        h = ops.relu(self.hidden(x))
        h = ops.dropout(h, dropout, rng, self.training)
        return self.out(h)
