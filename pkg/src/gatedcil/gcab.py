"""Gated class-attention decoder, per-task heads and multi-pass prediction.

Only two masks are learned per task: ``m_i`` over the D embedding channels and
``m_2`` over the MLP hidden channels. The query/key, value, first-MLP and
output sites all reuse ``m_i``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .autodiff import Linear, Module, ShapeError, Tensor, ops
from .autodiff.nn import _param
from .backbone import merge_heads, split_heads


@dataclass
class TaskMaskSet:
    m_i: Tensor
    m_2: Tensor

    @property
    def m_qk(self) -> Tensor:
        return self.m_i

    @property
    def m_v(self) -> Tensor:
        return self.m_i

    @property
    def m_1(self) -> Tensor:
        return self.m_i

    @property
    def m_o(self) -> Tensor:
        return self.m_i

    @classmethod
    def constant(cls, m_i: np.ndarray, m_2: np.ndarray) -> "TaskMaskSet":
        return cls(Tensor(np.array(m_i)), Tensor(np.array(m_2)))

    def numpy(self) -> tuple[np.ndarray, np.ndarray]:
        return self.m_i.data.copy(), self.m_2.data.copy()


def compute_mask(embedding: Tensor, task_index: int, s: float) -> Tensor:
    """sigma(s * A @ onehot(t)) for a 1-based task index."""
    if s <= 0:
        raise ValueError(f"scaling parameter must be positive, got {s}")
    capacity = embedding.shape[1]
    if not 1 <= task_index <= capacity:
        raise IndexError(f"task {task_index} outside mask embedding capacity 1..{capacity}")
    return ops.sigmoid(ops.mul(embedding[:, task_index - 1], float(s)))


class MaskEmbedding(Module):
    def __init__(self, dim: int, hidden: int, max_tasks: int, rng: np.random.Generator, init: float = 0.1) -> None:
        self.a_i = _param(rng.uniform(-init, init, size=(dim, max_tasks)))
        self.a_2 = _param(rng.uniform(-init, init, size=(hidden, max_tasks)))

    @property
    def max_tasks(self) -> int:
        return self.a_i.shape[1]

    def masks(self, task_index: int, s: float) -> TaskMaskSet:
        return TaskMaskSet(compute_mask(self.a_i, task_index, s), compute_mask(self.a_2, task_index, s))


class ClassAttention(Module):
    """Weights of one class-attention block: class token, Q/K/V/O maps and a two-layer MLP."""

    def __init__(self, dim: int, heads: int, mlp_ratio: float, rng: np.random.Generator,
                 mlp_activation: str = "none") -> None:
        if dim % heads:
            raise ValueError(f"embed dim {dim} is not divisible by {heads} heads")
        if mlp_activation not in ("none", "gelu"):
            raise ValueError(f"unknown decoder MLP activation {mlp_activation!r}")
        hidden = int(round(dim * mlp_ratio))
        self.num_heads = heads
        self.mlp_activation = mlp_activation
        self.class_token = _param(rng.normal(0.0, 0.02, size=(1, dim)))
        self.q = Linear(dim, dim, rng)
        self.k = Linear(dim, dim, rng)
        self.v = Linear(dim, dim, rng)
        self.o = Linear(dim, dim, rng)
        self.fc1 = Linear(dim, hidden, rng)
        self.fc2 = Linear(hidden, dim, rng)

    @property
    def dim(self) -> int:
        return self.class_token.shape[1]

    @property
    def hidden(self) -> int:
        return self.fc1.out_features


def _gate(x: Tensor, mask: Tensor | None) -> Tensor:
    return x if mask is None else ops.mul(x, mask)


def gcab_forward(b: Tensor, masks: TaskMaskSet | None, block: ClassAttention) -> Tensor:
    """Gated class-attention on (B, N, D) patch features; returns f of shape (B, D).

    ``masks=None`` runs the plain, unmasked class-attention block.
    """
    if b.ndim != 3 or b.shape[-1] != block.dim:
        raise ShapeError(f"expected (B, N, {block.dim}) features, got {b.shape}")
    if masks is not None:
        if masks.m_i.shape != (block.dim,) or masks.m_2.shape != (block.hidden,):
            raise ShapeError(
                f"mask shapes {masks.m_i.shape}/{masks.m_2.shape} do not match channels "
                f"({block.dim},)/({block.hidden},)"
            )
    m_i = None if masks is None else masks.m_i
    m_2 = None if masks is None else masks.m_2
    batch, dim = b.shape[0], block.dim

    theta = ops.broadcast_to(block.class_token, (batch, 1, dim))
    p = ops.concat([theta, b], axis=1)
    q = _gate(block.q(_gate(theta, m_i)), m_i)
    k = _gate(block.k(_gate(p, m_i)), m_i)
    v = _gate(block.v(_gate(p, m_i)), m_i)

    qh, kh, vh = (split_heads(t, block.num_heads) for t in (q, k, v))
    scores = ops.mul(ops.matmul(qh, ops.swapaxes(kh, -1, -2)), 1.0 / np.sqrt(dim / block.num_heads))
    attn = ops.softmax(scores, axis=-1)
    o = block.o(merge_heads(ops.matmul(attn, vh)))

    b_prime = ops.add(o, theta)
    u = block.fc1(_gate(b_prime, m_i))
    if block.mlp_activation == "gelu":
        u = ops.gelu(u)
    v2 = block.fc2(_gate(u, m_2))
    f = ops.add(v2, o)
    return ops.reshape(f, (batch, dim))


def classify(f: Tensor, m_o: Tensor | None, head: Linear | None, layernorm: bool = False) -> Tensor:
    """Per-task logits ``W_clf (f * m_o)``, optionally layer-normalized before the head.

    The norm's mean shift would make masked channels nonzero again, so ``m_o`` is
    re-applied after it; otherwise trainable head rows would leak into old tasks.
    """
    if head is None:
        raise KeyError("no classifier head for this task")
    if f.shape[-1] != head.in_features:
        raise ShapeError(f"feature width {f.shape[-1]} != head input {head.in_features}")
    x = _gate(f, m_o)
    if layernorm:
        x = _gate(ops.layer_norm(x), m_o)
    return head(x)


class Gcab(ClassAttention):
    """Class-attention block plus mask embedding and the growing list of task heads."""

    def __init__(self, dim: int, heads: int, mlp_ratio: float, max_tasks: int, rng: np.random.Generator,
                 mlp_activation: str = "none", classifier_layernorm: bool = True, mask_init: float = 0.1) -> None:
        super().__init__(dim, heads, mlp_ratio, rng, mlp_activation)
        self.classifier_layernorm = classifier_layernorm
        self.mask_embedding = MaskEmbedding(dim, self.hidden, max_tasks, rng, mask_init)
        self.classifiers: list[Linear] = []

    def add_head(self, num_classes: int, rng: np.random.Generator) -> Linear:
        head = Linear(self.dim, num_classes, rng)
        self.classifiers.append(head)
        return head

    def head(self, task_index: int) -> Linear:
        if not 1 <= task_index <= len(self.classifiers):
            raise KeyError(f"no classifier head for task {task_index}")
        return self.classifiers[task_index - 1]

    def task_logits(self, b: Tensor, task_index: int, masks: TaskMaskSet | None) -> tuple[Tensor, Tensor]:
        f = gcab_forward(b, masks, self)
        m_o = None if masks is None else masks.m_o
        return classify(f, m_o, self.head(task_index), self.classifier_layernorm), f


def multi_pass_predict(
    features_for_task: Callable[[int], Tensor],
    gcab: Gcab,
    masks_for_task: Callable[[int], TaskMaskSet | None],
    num_tasks: int,
) -> tuple[Tensor, list[Tensor]]:
    """Run one gated pass per seen task and concatenate the head outputs.

    ``features_for_task(t)`` supplies the (possibly drift-compensated) backbone
    features for pass ``t``; ``masks_for_task(t)`` the masks at inference scale.
    """
    if num_tasks < 1:
        raise ValueError("need at least one task")
    per_task = []
    for t in range(1, num_tasks + 1):
        logits, _ = gcab.task_logits(features_for_task(t), t, masks_for_task(t))
        per_task.append(logits)
    return ops.concat(per_task, axis=-1), per_task


def task_slices(class_counts: Sequence[int]) -> list[slice]:
    bounds = np.cumsum([0, *class_counts])
    return [slice(int(lo), int(hi)) for lo, hi in zip(bounds[:-1], bounds[1:])]
