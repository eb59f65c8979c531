"""PNG figures for a finished run directory (accuracy matrices, capacity, cumulative metrics)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .metrics import AccuracyMatrix, MetricReport  # noqa: E402


def _matrix_axes(ax, grid: np.ndarray, title: str) -> None:
    shown = np.ma.masked_invalid(grid)
    im = ax.imshow(shown, vmin=0.0, vmax=100.0, cmap="viridis")
    n_stage, n_task = grid.shape
    for i in range(n_stage):
        for j in range(n_task):
            if np.isfinite(grid[i, j]):
                ax.text(j, i, f"{grid[i, j]:.1f}", ha="center", va="center", fontsize=7,
                        color="white" if grid[i, j] < 60 else "black")
    ax.set_xticks(range(n_task), [str(j + 1) for j in range(n_task)])
    ax.set_yticks(range(n_stage), [str(i + 1) for i in range(n_stage)])
    ax.set_xlabel("task")
    ax.set_ylabel("after training task")
    ax.set_title(title)
    return im


def accuracy_figure(matrix: AccuracyMatrix, path: Path) -> Path:
    fig, axes = plt.subplots(1, 2, figsize=(9, 4), constrained_layout=True)
    _matrix_axes(axes[0], matrix.tag(), "task-agnostic accuracy (%)")
    im = _matrix_axes(axes[1], matrix.taw(), "task-aware accuracy (%)")
    fig.colorbar(im, ax=axes, shrink=0.8)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def capacity_figure(capacity_log: list[dict[str, float]], path: Path) -> Path:
    fig, ax = plt.subplots(figsize=(5, 3.5), constrained_layout=True)
    tasks = np.arange(1, len(capacity_log) + 1)
    components = sorted({k for usage in capacity_log for k in usage})
    for name in components:
        ax.plot(tasks, [usage.get(name, np.nan) for usage in capacity_log], marker="o", label=name)
    ax.set_xticks(tasks)
    ax.set_ylim(0.0, 1.05)
    ax.set_xlabel("task")
    ax.set_ylabel("capacity used")
    ax.legend(fontsize=7)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def cumulative_figure(report: MetricReport, path: Path) -> Path:
    fig, ax = plt.subplots(figsize=(5, 3.5), constrained_layout=True)
    tasks = np.arange(1, len(report.cumulative_accuracy) + 1)
    ax.plot(tasks, report.cumulative_accuracy, marker="o", label="cumulative accuracy")
    ax.plot(tasks, report.cumulative_forgetting, marker="s", label="cumulative forgetting")
    ax.set_xticks(tasks)
    ax.set_xlabel("first k tasks")
    ax.set_ylabel("%")
    ax.legend(fontsize=7)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def render_report(matrix: AccuracyMatrix, report: MetricReport, capacity_log: list[dict[str, float]],
                  out_dir: Path) -> list[Path]:
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = [accuracy_figure(matrix, out_dir / "accuracy_matrix.png"),
             cumulative_figure(report, out_dir / "cumulative.png")]
    if capacity_log:
        paths.append(capacity_figure(capacity_log, out_dir / "capacity.png"))
    return paths
