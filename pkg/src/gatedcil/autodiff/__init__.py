"""Minimal reverse-mode autodiff engine used by every model component."""

from . import ops
from .nn import LayerNorm, Linear, Module
from .optim import Adam, GradGate
from .tensor import (
    FlopCounter,
    GraphError,
    NonFiniteError,
    ShapeError,
    Tensor,
    count_flops,
    get_dtype,
    is_grad_enabled,
    no_grad,
    ones,
    precision,
    set_precision,
    tensor,
    zeros,
)

__all__ = [
    "ops",
    "Adam",
    "FlopCounter",
    "GradGate",
    "GraphError",
    "LayerNorm",
    "Linear",
    "Module",
    "NonFiniteError",
    "ShapeError",
    "Tensor",
    "count_flops",
    "get_dtype",
    "is_grad_enabled",
    "no_grad",
    "ones",
    "precision",
    "set_precision",
    "tensor",
    "zeros",
]
