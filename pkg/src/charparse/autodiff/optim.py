"""Adam with bias correction, linear warmup and per-group learning rates."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .tape import Parameter


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    warmup_steps: int = 0
    # with total_steps set, the rate decays linearly to 0 after warmup
    total_steps: Optional[int] = None
    max_grad_norm: Optional[float] = None
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    # name -> learning rate override (parameter groups)
    lr_overrides: dict[str, float] = field(default_factory=dict)
    initialized: bool = False

    def init(self, params: Sequence[Parameter]) -> "AdamState":
        names = [p.name for p in params]
        if len(set(names)) != len(names) or "" in names:
            raise ValueError("Adam needs uniquely named parameters")
        for p in params:
            self.m[p.name] = np.zeros_like(p.data)
            self.v[p.name] = np.zeros_like(p.data)
        self.initialized = True
        return self

    def lr_at(self, step: int, base: float) -> float:
        if self.warmup_steps > 0 and step <= self.warmup_steps:
            return base * step / self.warmup_steps
        if self.total_steps:
            span = max(self.total_steps - self.warmup_steps, 1)
            return base * max(0.0, (self.total_steps - step) / span)
        return base


def clip_grad_norm(params: Sequence[Parameter], max_norm: float) -> float:
    total = float(np.sqrt(sum(float((p.grad.astype(np.float64) ** 2).sum()) for p in params)))
    if total > max_norm:
        factor = max_norm / (total + 1e-12)
        for p in params:
            p.grad *= factor
    return total


def adam_step(params: Sequence[Parameter], state: AdamState) -> AdamState:
    """One Adam update of ``params`` in place; gradients are zeroed afterwards."""
    if not state.initialized:
        raise RuntimeError("Adam state is not initialized; call AdamState.init(params)")
    if state.max_grad_norm is not None:
        clip_grad_norm(params, state.max_grad_norm)
    state.t += 1
    t = state.t
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for p in params:
        g = p.grad
        m = state.m[p.name]
        v = state.v[p.name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        lr = state.lr_at(t, state.lr_overrides.get(p.name, state.lr))
        if lr != 0.0:
            update = lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
            p.data -= update.astype(p.data.dtype)
        p.zero_grad()
    return state


class Adam:
    """Thin stateful wrapper around :func:`adam_step`."""

    def __init__(self, params: Sequence[Parameter], **hyper):
        self.params = list(params)
        self.state = AdamState(**hyper).init(self.params)

    def step(self) -> None:
        adam_step(self.params, self.state)

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()
