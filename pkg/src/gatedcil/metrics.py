"""Accuracy matrices and continual-learning summary metrics.

Evaluation stores integer counts, and every metric is formed with exact
rational arithmetic before the final conversion to float. Two code paths that
count the same predictions therefore report bit-identical numbers.

Cumulative accuracy for the first k tasks after stage t is the accuracy on the
test data of tasks 1..k when prediction is restricted to the classes of tasks
1..k. Cumulative forgetting of k after the last stage is the best earlier
cumulative accuracy for k minus the final one.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from typing import Sequence

import numpy as np


@dataclass
class StageResult:
    """Counts gathered after training task ``stage`` (1-based) on tasks 1..stage."""

    stage: int
    tag_correct: list[int]
    taw_correct: list[int]
    total: list[int]
    cum_correct: list[int]
    cum_total: list[int]

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in ("stage", "tag_correct", "taw_correct", "total", "cum_correct", "cum_total")}

    @classmethod
    def from_dict(cls, d: dict) -> "StageResult":
        return cls(**{k: (list(map(int, v)) if isinstance(v, list) else int(v)) for k, v in d.items()})


def score_stage(stage: int, logits_per_task: Sequence[np.ndarray], columns_per_task: Sequence[np.ndarray],
                class_counts: Sequence[int]) -> StageResult:
    """Count correct predictions for one stage.

    ``logits_per_task[j]`` holds the concatenated logits (width sum(class_counts)) of
    the test samples of task j+1, and ``columns_per_task[j]`` their true columns.
    """
    if len(logits_per_task) != stage or len(class_counts) != stage:
        raise ValueError("need logits and class counts for every task seen so far")
    bounds = np.cumsum([0, *class_counts])
    tag, taw, total = [], [], []
    for j, (logits, cols) in enumerate(zip(logits_per_task, columns_per_task)):
        lo, hi = bounds[j], bounds[j + 1]
        tag.append(int((logits.argmax(axis=1) == cols).sum()))
        taw.append(int((logits[:, lo:hi].argmax(axis=1) + lo == cols).sum()))
        total.append(int(len(cols)))
    cum_correct, cum_total = [], []
    for k in range(1, stage + 1):
        hi = bounds[k]
        correct = sum(int((logits_per_task[j][:, :hi].argmax(axis=1) == columns_per_task[j]).sum()) for j in range(k))
        cum_correct.append(correct)
        cum_total.append(sum(total[:k]))
    return StageResult(stage, tag, taw, total, cum_correct, cum_total)


@dataclass
class AccuracyMatrix:
    """Lower-triangular collection of stage results (row t covers tasks 1..t)."""

    stages: list[StageResult] = field(default_factory=list)

    def add(self, result: StageResult) -> None:
        if result.stage != len(self.stages) + 1:
            raise ValueError(f"expected stage {len(self.stages) + 1}, got {result.stage}")
        self.stages.append(result)

    @property
    def num_stages(self) -> int:
        return len(self.stages)

    def _grid(self, attr: str) -> np.ndarray:
        n = self.num_stages
        grid = np.full((n, n), np.nan)
        for i, st in enumerate(self.stages):
            for j in range(st.stage):
                grid[i, j] = float(_pct(getattr(st, attr)[j], st.total[j]))
        return grid

    def tag(self) -> np.ndarray:
        return self._grid("tag_correct")

    def taw(self) -> np.ndarray:
        return self._grid("taw_correct")

    def cumulative(self) -> np.ndarray:
        n = self.num_stages
        grid = np.full((n, n), np.nan)
        for i, st in enumerate(self.stages):
            for k in range(st.stage):
                grid[i, k] = float(_pct(st.cum_correct[k], st.cum_total[k]))
        return grid

    def to_list(self) -> list[dict]:
        return [st.to_dict() for st in self.stages]

    @classmethod
    def from_list(cls, items: list[dict]) -> "AccuracyMatrix":
        m = cls()
        for item in items:
            m.add(StageResult.from_dict(item))
        return m


def _pct(correct: int, total: int) -> Fraction:
    if total <= 0:
        raise ValueError("empty evaluation split")
    return Fraction(100 * correct, total)


def _mean(values: Sequence[Fraction]) -> Fraction:
    return sum(values, Fraction(0)) / len(values)


@dataclass
class MetricReport:
    acc_tag: float
    acc_taw: float
    acc_avg: float
    cumulative_accuracy: list[float]
    cumulative_forgetting: list[float]
    mean_cumulative_forgetting: float
    per_stage_tag: list[float]

    def summary_rows(self) -> list[tuple[str, float]]:
        rows = [("ACC_TAG", self.acc_tag), ("ACC_TAW", self.acc_taw), ("ACC_AVG", self.acc_avg)]
        rows += [(f"cumulative_accuracy_{k}", v) for k, v in enumerate(self.cumulative_accuracy, start=1)]
        rows += [(f"cumulative_forgetting_{k}", v) for k, v in enumerate(self.cumulative_forgetting, start=1)]
        rows.append(("mean_cumulative_forgetting", self.mean_cumulative_forgetting))
        return rows


def metrics(matrix: AccuracyMatrix, num_tasks: int | None = None) -> MetricReport:
    """ACC_TAG, ACC_TAW, ACC_AVG and cumulative accuracy/forgetting from a complete matrix."""
    n = matrix.num_stages
    if n == 0 or (num_tasks is not None and n != num_tasks):
        raise ValueError(f"accuracy matrix incomplete: {n} stages, expected {num_tasks}")
    for i, st in enumerate(matrix.stages, start=1):
        if st.stage != i or len(st.total) != i:
            raise ValueError(f"stage {i} is malformed or missing")
    last = matrix.stages[-1]
    acc_tag = _pct(sum(last.tag_correct), sum(last.total))
    acc_taw = _mean([_pct(c, t) for c, t in zip(last.taw_correct, last.total)])
    per_stage = [_pct(sum(st.tag_correct), sum(st.total)) for st in matrix.stages]
    acc_avg = _mean(per_stage)
    cum = [[_pct(st.cum_correct[k], st.cum_total[k]) for k in range(st.stage)] for st in matrix.stages]
    final_cum = cum[-1]
    forgetting = []
    for k in range(n):
        earlier = [cum[t][k] for t in range(k, n - 1)]
        forgetting.append(max(earlier) - final_cum[k] if earlier else Fraction(0))
    return MetricReport(
        acc_tag=float(acc_tag),
        acc_taw=float(acc_taw),
        acc_avg=float(acc_avg),
        cumulative_accuracy=[float(v) for v in final_cum],
        cumulative_forgetting=[float(v) for v in forgetting],
        mean_cumulative_forgetting=float(_mean(forgetting)),
        per_stage_tag=[float(v) for v in per_stage],
    )
