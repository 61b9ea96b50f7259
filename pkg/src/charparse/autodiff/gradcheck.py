"""Finite-difference gradient checking."""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

from .tape import Parameter, Tape, Tensor, backward, no_grad


def grad_check(
    fn: Callable[[], Tensor],
    params: Sequence[Parameter],
    eps: float = 1e-5,
    max_coords: Optional[int] = 40,
    rng: Optional[np.random.Generator] = None,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    The numeric derivative uses the five-point central stencil
    (f(x-2h) - 8 f(x-h) + 8 f(x+h) - f(x+2h)) / 12h, whose O(h^4) truncation
    error lets h stay large enough to keep float64 roundoff small.

    ``fn`` builds a scalar loss from ``params``; it must be deterministic
    (no dropout). Parameters must already be float64. Up to ``max_coords``
    coordinates are sampled per parameter (all if None).
    """
    if not 1e-7 <= eps <= 1e-4:
        raise ValueError(f"eps must lie in [1e-7, 1e-4], got {eps}")
    for p in params:
        if p.data.dtype != np.float64:
            raise TypeError(f"grad_check needs float64 parameters, {p.name or p} is {p.data.dtype}")
        p.zero_grad()
    rng = rng or np.random.default_rng(0)

    with Tape() as tape:
        loss = fn()
    if not np.isfinite(loss.data).all():
        raise FloatingPointError("grad_check: non-finite loss")
    backward(tape, loss)
    analytic = [p.grad.copy() for p in params]

    def value() -> float:
        with no_grad():
            out = fn()
        v = float(out.data)
        if not np.isfinite(v):
            raise FloatingPointError("grad_check: non-finite loss")
        return v

    worst = 0.0
    for p, grad in zip(params, analytic):
        flat = p.data.reshape(-1)
        n = flat.size
        coords = np.arange(n) if max_coords is None or n <= max_coords else rng.choice(n, max_coords, replace=False)
        for i in coords:
            orig = flat[i]
            f = []
            for k in (-2, -1, 1, 2):
                flat[i] = orig + k * eps
                f.append(value())
            flat[i] = orig
            numeric = (8 * (f[2] - f[1]) - (f[3] - f[0])) / (12 * eps)
            a = float(grad.reshape(-1)[i])
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, err)
        p.zero_grad()
    return worst
