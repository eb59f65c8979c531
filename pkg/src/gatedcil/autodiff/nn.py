"""Parameter containers built on the tensor engine."""

from __future__ import annotations

import copy
from typing import Iterator

import numpy as np

from . import ops
from .tensor import Tensor, get_dtype


class Module:
    """Walks attributes to find tensors; subclasses just assign Tensors and Modules."""

    def named_tensors(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        """Every tensor attribute, trainable or frozen, in a stable order."""
        for key, value in vars(self).items():
            if key.startswith("_"):
                continue
            name = f"{prefix}{key}"
            if isinstance(value, Tensor):
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_tensors(name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_tensors(f"{name}.{i}.")
                    elif isinstance(item, Tensor):
                        yield f"{name}.{i}", item

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        return ((n, t) for n, t in self.named_tensors(prefix) if t.requires_grad)

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return int(sum(t.size for _, t in self.named_tensors()))

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self.named_tensors()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        tensors = dict(self.named_tensors())
        missing = set(tensors) - set(state)
        if missing:
            raise KeyError(f"state is missing tensors: {sorted(missing)}")
        for name, t in tensors.items():
            value = np.asarray(state[name])
            if value.shape != t.shape:
                raise ValueError(f"{name}: stored shape {value.shape} != tensor shape {t.shape}")
            t.data = value.astype(t.data.dtype, copy=True)

    def freeze(self) -> None:
        for _, t in self.named_tensors():
            t.requires_grad = False

    def frozen_copy(self):
        """Deep copy whose tensors never receive gradients."""
        clone = copy.deepcopy(self)
        clone.freeze()
        return clone


def _param(array) -> Tensor:
    return Tensor(np.asarray(array, dtype=get_dtype()), requires_grad=True)


class Linear(Module):
    """``y = x @ weight + bias`` with ``weight`` stored as (in, out)."""

    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator, bias: bool = True,
                 std: float | None = None) -> None:
        std = (1.0 / np.sqrt(in_features)) if std is None else std
        self.weight = _param(rng.normal(0.0, std, size=(in_features, out_features)))
        self.bias = _param(np.zeros(out_features)) if bias else None

    @property
    def in_features(self) -> int:
        return self.weight.shape[0]

    @property
    def out_features(self) -> int:
        return self.weight.shape[1]

    def __call__(self, x: Tensor) -> Tensor:
        y = ops.matmul(x, self.weight)
        if self.bias is not None:
            y = ops.add(y, self.bias)
        return y


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-6) -> None:
        self.weight = _param(np.ones(dim))
        self.bias = _param(np.zeros(dim))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return ops.add(ops.mul(ops.layer_norm(x, self.eps), self.weight), self.bias)
