"""A small dense-tensor reverse-mode autodiff engine on top of numpy."""

from . import ops
from .gradcheck import grad_check
from .nn import MLP, Embedding, LayerNorm, Linear, Module
from .optim import Adam, AdamState, adam_step, clip_grad_norm
from .tape import (
    Parameter,
    Tape,
    Tensor,
    as_tensor,
    backward,
    get_dtype,
    no_grad,
    precision,
    recording,
    set_debug,
)

__all__ = [
    "Adam",
    "AdamState",
    "Embedding",
    "LayerNorm",
    "Linear",
    "MLP",
    "Module",
    "Parameter",
    "Tape",
    "Tensor",
    "adam_step",
    "as_tensor",
    "backward",
    "clip_grad_norm",
    "get_dtype",
    "grad_check",
    "no_grad",
    "ops",
    "precision",
    "recording",
    "set_debug",
]
