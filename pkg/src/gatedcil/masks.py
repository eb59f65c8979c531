"""Mask lifecycle: scale annealing, accumulation, sparsity loss, weight gates and capacity."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .autodiff import GradGate, Tensor, ops
from .gcab import Gcab, TaskMaskSet

log = logging.getLogger(__name__)


def anneal_s(i: int, num_batches: int, s_max: float) -> float:
    """Scale for batch ``i`` (1-based) of an epoch with ``num_batches`` batches.

    Rises linearly from 1/s_max at the first batch to s_max at the last.
    """
    if num_batches < 1 or not 1 <= i <= num_batches:
        raise ValueError(f"batch index {i} outside 1..{num_batches}")
    if s_max <= 1:
        raise ValueError(f"s_max must exceed 1, got {s_max}")
    if num_batches == 1:
        return float(s_max)
    frac = (i - 1) / (num_batches - 1)
    # two-sided form is exact at both endpoints
    return (1.0 - frac) * (1.0 / s_max) + frac * s_max


@dataclass
class CumulativeMasks:
    """Running elementwise max of completed tasks' masks (``m^{<t}``)."""

    m_i: np.ndarray
    m_2: np.ndarray
    task_count: int = 0
    accumulated: list[int] = field(default_factory=list)

    @classmethod
    def empty(cls, dim: int, hidden: int) -> "CumulativeMasks":
        return cls(np.zeros(dim), np.zeros(hidden))

    # aliases share storage with m_i
    @property
    def m_qk(self) -> np.ndarray:
        return self.m_i

    @property
    def m_v(self) -> np.ndarray:
        return self.m_i

    @property
    def m_1(self) -> np.ndarray:
        return self.m_i

    @property
    def m_o(self) -> np.ndarray:
        return self.m_i


def binarize(mask: np.ndarray) -> np.ndarray:
    return (mask > 0.5).astype(mask.dtype)


def accumulate(current: TaskMaskSet | tuple[np.ndarray, np.ndarray], previous: CumulativeMasks,
               task_index: int | None = None) -> CumulativeMasks:
    """Fold a finished task's masks (evaluated at s_max) into the running max."""
    task_index = previous.task_count + 1 if task_index is None else task_index
    if task_index in previous.accumulated:
        raise ValueError(f"masks of task {task_index} were already accumulated")
    if isinstance(current, TaskMaskSet):
        m_i, m_2 = current.numpy()
    else:
        m_i, m_2 = (np.asarray(m) for m in current)
    if m_i.shape != previous.m_i.shape or m_2.shape != previous.m_2.shape:
        raise ValueError("mask shapes do not match the cumulative masks")
    return CumulativeMasks(
        np.maximum(previous.m_i, m_i),
        np.maximum(previous.m_2, m_2),
        previous.task_count + 1,
        [*previous.accumulated, task_index],
    )


def sparsity_loss(current: TaskMaskSet, cumulative: CumulativeMasks, weight: float) -> Tensor:
    """Share of still-free gated units claimed by the current task, times ``weight``.

    Each physically distinct mask (m_i, m_2) is counted once.
    """
    free_i = 1.0 - cumulative.m_i
    free_2 = 1.0 - cumulative.m_2
    denom = float(free_i.sum() + free_2.sum())
    if denom <= 0.0:
        log.warning("mask capacity exhausted: every gated unit is claimed by earlier tasks")
        return Tensor(np.zeros(()))
    used = ops.add(ops.sum(ops.mul(current.m_i, free_i)), ops.sum(ops.mul(current.m_2, free_2)))
    return ops.mul(used, weight / denom)


@dataclass
class WeightMaskSet:
    """Per-weight gradient gates; weights are stored (in, out) so entry [k, l] maps input k to output l."""

    q: np.ndarray
    k: np.ndarray
    v: np.ndarray
    o: np.ndarray
    fc1: np.ndarray
    fc2: np.ndarray
    class_token: np.ndarray
    classifier: np.ndarray
    bias_q: np.ndarray
    bias_k: np.ndarray
    bias_v: np.ndarray
    bias_o: np.ndarray
    bias_fc1: np.ndarray
    bias_fc2: np.ndarray


def _pair_gate(rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    return 1.0 - np.minimum(rows[:, None], cols[None, :])


def build_weight_masks(cumulative: CumulativeMasks) -> WeightMaskSet:
    c = cumulative
    return WeightMaskSet(
        q=_pair_gate(c.m_i, c.m_qk),
        k=_pair_gate(c.m_i, c.m_qk),
        v=_pair_gate(c.m_i, c.m_v),
        o=_pair_gate(c.m_v, c.m_1),
        fc1=_pair_gate(c.m_1, c.m_2),
        fc2=_pair_gate(c.m_2, c.m_o),
        class_token=(1.0 - c.m_i)[None, :],
        classifier=1.0 - c.m_o,
        bias_q=1.0 - c.m_qk,
        bias_k=1.0 - c.m_qk,
        bias_v=1.0 - c.m_v,
        bias_o=1.0 - c.m_1,
        bias_fc1=1.0 - c.m_2,
        bias_fc2=1.0 - c.m_o,
    )


def install_gates(gcab: Gcab, weight_masks: WeightMaskSet, current_task: int) -> list[GradGate]:
    """Gradient gates for every GCAB tensor while training ``current_task`` (1-based).

    Heads of completed tasks get the classifier gate on their weights and a frozen
    bias; mask-embedding columns of completed tasks are frozen.
    """
    wm = weight_masks
    gates = [GradGate(gcab.class_token, wm.class_token)]
    for layer, w_gate, b_gate in (
        (gcab.q, wm.q, wm.bias_q),
        (gcab.k, wm.k, wm.bias_k),
        (gcab.v, wm.v, wm.bias_v),
        (gcab.o, wm.o, wm.bias_o),
        (gcab.fc1, wm.fc1, wm.bias_fc1),
        (gcab.fc2, wm.fc2, wm.bias_fc2),
    ):
        gates.append(GradGate(layer.weight, w_gate))
        if layer.bias is not None:
            gates.append(GradGate(layer.bias, b_gate))
    for t, head in enumerate(gcab.classifiers, start=1):
        if t >= current_task:
            continue
        gates.append(GradGate(head.weight, np.repeat(wm.classifier[:, None], head.out_features, axis=1)))
        if head.bias is not None:
            gates.append(GradGate(head.bias, np.zeros(head.out_features)))
    for emb in (gcab.mask_embedding.a_i, gcab.mask_embedding.a_2):
        column_gate = np.zeros(emb.shape)
        column_gate[:, current_task - 1:] = 1.0
        gates.append(GradGate(emb, column_gate))
    return gates


def capacity_usage(cumulative: CumulativeMasks) -> dict[str, float]:
    """Mean claimed fraction per physical mask and over all gated units."""
    both = np.concatenate([cumulative.m_i, cumulative.m_2])
    return {
        "m_i": float(cumulative.m_i.mean()),
        "m_2": float(cumulative.m_2.mean()),
        "aggregate": float(both.mean()),
    }
