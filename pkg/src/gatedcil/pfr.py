"""Projected functional regularization and cascaded feature drift compensation."""

from __future__ import annotations

import logging

import numpy as np

from .autodiff import Linear, Module, Tensor, ops
from .autodiff.nn import _param

log = logging.getLogger(__name__)


class ProjectionNetwork(Module):
    """Per-token map D -> D from task-t backbone features toward task-(t-1) features.

    One layer is a linear map initialized at identity plus noise. Two layers add
    a GELU MLP branch on top of the identity path, with a small output layer, so
    the network also starts close to the identity.
    """

    def __init__(self, dim: int, layers: int, rng: np.random.Generator, noise: float = 1e-2) -> None:
        if layers not in (1, 2):
            raise ValueError(f"projector layers must be 1 or 2, got {layers}")
        self.layers = layers
        if layers == 1:
            self.linear = Linear(dim, dim, rng)
            self.linear.weight.data = (np.eye(dim) + rng.normal(0.0, noise, (dim, dim))).astype(
                self.linear.weight.data.dtype
            )
        else:
            self.fc1 = Linear(dim, dim, rng)
            self.fc1.weight.data = (np.eye(dim) + rng.normal(0.0, noise, (dim, dim))).astype(
                self.fc1.weight.data.dtype
            )
            self.fc2 = Linear(dim, dim, rng, std=noise)

    @classmethod
    def from_matrix(cls, weight: np.ndarray, bias: np.ndarray | None = None) -> "ProjectionNetwork":
        """Fixed linear projector ``x @ weight + bias`` (useful for closed-form checks)."""
        dim = weight.shape[0]
        net = cls(dim, 1, np.random.default_rng(0))
        net.linear.weight = _param(weight)
        net.linear.bias = _param(np.zeros(dim) if bias is None else bias)
        return net

    def __call__(self, x: Tensor) -> Tensor:
        if self.layers == 1:
            return self.linear(x)
        return ops.add(x, self.fc2(ops.gelu(self.fc1(x))))


class ProjectorStack:
    """Frozen projectors keyed by the task that trained them (2..t)."""

    def __init__(self) -> None:
        self.projectors: dict[int, ProjectionNetwork] = {}

    def __len__(self) -> int:
        return len(self.projectors)

    def __contains__(self, task: int) -> bool:
        return task in self.projectors

    def __getitem__(self, task: int) -> ProjectionNetwork:
        return self.projectors[task]

    def tasks(self) -> list[int]:
        return sorted(self.projectors)

    def push(self, task: int, projector: ProjectionNetwork) -> None:
        if task < 2:
            raise ValueError("projectors start at task 2")
        if task in self.projectors:
            raise ValueError(f"projector for task {task} already stored")
        expected = 2 + len(self.projectors)
        if task != expected:
            raise ValueError(f"projector for task {task} breaks contiguity; expected task {expected}")
        projector.freeze()
        self.projectors[task] = projector

    def num_parameters(self) -> int:
        return sum(p.num_parameters() for p in self.projectors.values())


def cascade_project(features: Tensor, stack: ProjectorStack, target_task: int, current_task: int,
                    extra: dict[int, ProjectionNetwork] | None = None) -> Tensor:
    """Map task-``current_task`` features back to task ``target_task``.

    Applies p^t first, then p^{t-1}, ..., down to p^{s+1}. ``extra`` supplies
    projectors not yet pushed onto the stack (e.g. the one being trained).
    """
    if target_task > current_task:
        raise ValueError(f"target task {target_task} is later than current task {current_task}")
    x = features
    for j in range(current_task, target_task, -1):
        if extra is not None and j in extra:
            proj = extra[j]
        elif j in stack:
            proj = stack[j]
        else:
            raise KeyError(f"missing projector p^{j} in cascade from task {current_task} to {target_task}")
        x = proj(x)
    return x


def _mean_cosine_distance(a: Tensor, b: Tensor, eps: float) -> Tensor:
    na = np.linalg.norm(a.data, axis=-1)
    nb = np.linalg.norm(b.data, axis=-1)
    if (na < eps).any() or (nb < eps).any():
        log.warning("zero-norm token features; their cosine distance counts as 1")
    return ops.sub(1.0, ops.mean(ops.cosine_similarity(a, b, axis=-1, eps=eps)))


def pfr_loss(current: Tensor, previous: Tensor, projector: ProjectionNetwork, weight: float,
             eps: float = 1e-8) -> Tensor:
    """``weight`` x mean over batch and tokens of cos-distance(p(current), previous)."""
    if current.shape != previous.shape:
        raise ValueError(f"feature shapes differ: {current.shape} vs {previous.shape}")
    return ops.mul(_mean_cosine_distance(projector(current), previous.detach(), eps), weight)


def feature_distillation_loss(current: Tensor, previous: Tensor, weight: float, eps: float = 1e-8) -> Tensor:
    """Same distance with no projector: pulls new features straight onto the old ones."""
    if current.shape != previous.shape:
        raise ValueError(f"feature shapes differ: {current.shape} vs {previous.shape}")
    return ops.mul(_mean_cosine_distance(current, previous.detach(), eps), weight)
