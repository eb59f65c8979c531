"""Experiment runs: train a full task sequence, write CSV outputs and checkpoints, re-evaluate.

Run directory layout::

    config.yaml                resolved configuration
    metrics.csv                stage,task,tag_acc,taw_acc
    summary.csv                metric,value (ACC_TAG, ACC_TAW, ACC_AVG, cumulative metrics, capacity)
    capacity.csv               task_index,component,capacity_fraction
    stages.json                raw integer counts behind every metric
    checkpoints/task_<t>.ckpt  learner state after each task

Every CSV starts with ``# config_hash: ...`` and ``# seed: ...`` comment lines.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import os
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import precision
from .checkpoint import load_tensors
from .config import ExperimentConfig
from .data import dataset_from_config
from .harness import CilState, TaskLog, TaskSequence, evaluate, tasks_from_config, train_task
from .metrics import AccuracyMatrix, MetricReport, metrics
from .persist import load_state, save_state

log = logging.getLogger(__name__)

OUTPUT_ROOT_ENV = "GATEDCIL_OUTPUT_ROOT"


@dataclass
class RunResult:
    cfg: ExperimentConfig
    matrix: AccuracyMatrix
    report: MetricReport
    capacity_log: list[dict[str, float]]
    task_logs: list[TaskLog] = field(default_factory=list)
    state: CilState | None = None
    tasks: TaskSequence | None = None
    run_dir: Path | None = None
    seconds: float = 0.0


def default_run_dir(cfg: ExperimentConfig) -> Path:
    root = os.environ.get(OUTPUT_ROOT_ENV) or cfg.output_dir
    return Path(root) / cfg.name


def run_experiment(cfg: ExperimentConfig, run_dir: str | Path | None = None, checkpoints: bool = True,
                   num_tasks: int | None = None) -> RunResult:
    """Train every task (or the first ``num_tasks``) and evaluate after each one.

    With ``run_dir=None`` nothing is written to disk.
    """
    start = time.perf_counter()
    with precision(cfg.precision):
        tasks = tasks_from_config(cfg, dataset_from_config(cfg))
        state = CilState(cfg, tasks.class_counts, tasks.class_order)
        matrix = AccuracyMatrix()
        task_logs = []
        run_dir = None if run_dir is None else Path(run_dir)
        limit = len(tasks) if num_tasks is None else num_tasks
        for t in range(1, limit + 1):
            task_logs.append(train_task(state, tasks[t]))
            stage, _ = evaluate(state, tasks)
            matrix.add(stage)
            log.info("stage %d: task-agnostic %.2f", t, 100.0 * sum(stage.tag_correct) / sum(stage.total))
            if run_dir is not None and checkpoints:
                save_state(run_dir / "checkpoints" / f"task_{t}.ckpt", state, {"stages": matrix.to_list()})
        report = metrics(matrix)
    result = RunResult(cfg, matrix, report, list(state.capacity_log), task_logs, state, tasks, run_dir,
                       time.perf_counter() - start)
    if run_dir is not None:
        write_run_outputs(result, run_dir)
    return result


# -- CSV writers -----------------------------------------------------------------------


def _header(cfg: ExperimentConfig) -> str:
    return f"# config_hash: {cfg.config_hash()}\n# seed: {cfg.seed}\n"


def _csv(cfg: ExperimentConfig, header: list[str], rows: list[list]) -> str:
    buf = io.StringIO()
    buf.write(_header(cfg))
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buf.getvalue()


def _fmt(value: float) -> str:
    return repr(float(value))


def metrics_csv(cfg: ExperimentConfig, matrix: AccuracyMatrix) -> str:
    tag, taw = matrix.tag(), matrix.taw()
    rows = [[i + 1, j + 1, _fmt(tag[i, j]), _fmt(taw[i, j])]
            for i in range(matrix.num_stages) for j in range(i + 1)]
    return _csv(cfg, ["stage", "task", "tag_acc", "taw_acc"], rows)


def summary_csv(cfg: ExperimentConfig, report: MetricReport, capacity_log: list[dict[str, float]]) -> str:
    rows = [[name, _fmt(value)] for name, value in report.summary_rows()]
    for t, usage in enumerate(capacity_log, start=1):
        rows += [[f"capacity_task_{t}_{component}", _fmt(usage[component])] for component in sorted(usage)]
    return _csv(cfg, ["metric", "value"], rows)


def capacity_csv(cfg: ExperimentConfig, capacity_log: list[dict[str, float]]) -> str:
    rows = [[t, component, _fmt(usage[component])] for t, usage in enumerate(capacity_log, start=1)
            for component in sorted(usage)]
    return _csv(cfg, ["task_index", "component", "capacity_fraction"], rows)


def write_run_outputs(result: RunResult, run_dir: Path) -> None:
    run_dir.mkdir(parents=True, exist_ok=True)
    cfg = result.cfg
    (run_dir / "config.yaml").write_text(_header(cfg) + cfg.to_yaml(), encoding="utf-8")
    (run_dir / "metrics.csv").write_text(metrics_csv(cfg, result.matrix), encoding="utf-8")
    (run_dir / "summary.csv").write_text(summary_csv(cfg, result.report, result.capacity_log), encoding="utf-8")
    (run_dir / "capacity.csv").write_text(capacity_csv(cfg, result.capacity_log), encoding="utf-8")
    payload = {"config_hash": cfg.config_hash(), "seed": cfg.seed, "stages": result.matrix.to_list()}
    (run_dir / "stages.json").write_text(json.dumps(payload, indent=1), encoding="utf-8")


def read_csv(path: str | Path) -> tuple[dict[str, str], list[dict[str, str]]]:
    """Comment-line metadata and rows of one of the run CSVs."""
    meta, body = {}, []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.startswith("#"):
            key, _, value = line[1:].partition(":")
            meta[key.strip()] = value.strip()
        else:
            body.append(line)
    return meta, list(csv.DictReader(body))


# -- re-evaluation -----------------------------------------------------------------------


def stage_checkpoints(checkpoint: str | Path) -> list[Path]:
    """``task_1.ckpt .. task_t.ckpt`` next to the given ``task_t.ckpt``."""
    checkpoint = Path(checkpoint)
    stem = checkpoint.stem
    if not stem.startswith("task_") or not stem[5:].isdigit():
        raise ValueError(f"{checkpoint}: expected a file named task_<t>.ckpt")
    t = int(stem[5:])
    paths = [checkpoint.with_name(f"task_{j}.ckpt") for j in range(1, t + 1)]
    missing = [p.name for p in paths if not p.is_file()]
    if missing:
        raise FileNotFoundError(f"missing stage checkpoints {missing} next to {checkpoint}")
    return paths


def evaluate_checkpoint(checkpoint: str | Path) -> tuple[ExperimentConfig, AccuracyMatrix, MetricReport,
                                                          list[dict[str, float]]]:
    """Rebuild the accuracy matrix from the stage checkpoints up to ``checkpoint``."""
    paths = stage_checkpoints(checkpoint)
    matrix = AccuracyMatrix()
    cfg = None
    tasks = None
    capacity_log: list[dict[str, float]] = []
    for path in paths:
        meta = load_tensors(path)[1]
        with precision(meta["precision"]):
            state, meta = load_state(path)
            if tasks is None:
                cfg = state.cfg
                tasks = tasks_from_config(cfg, dataset_from_config(cfg))
            stage, _ = evaluate(state, tasks)
        matrix.add(stage)
        capacity_log = list(state.capacity_log)
    return cfg, matrix, metrics(matrix), capacity_log


def load_for_inference(checkpoint: str | Path) -> tuple[CilState, TaskSequence, dict]:
    """Learner plus its regenerated task sequence; the caller must hold the stored precision."""
    state, meta = load_state(checkpoint)
    tasks = tasks_from_config(state.cfg, dataset_from_config(state.cfg))
    return state, tasks, meta


def checkpoint_precision(checkpoint: str | Path) -> str:
    return load_tensors(checkpoint)[1]["precision"]


def embeddings_csv(state: CilState, tasks: TaskSequence, t: int) -> str:
    """Decoder outputs f for pass ``t`` on the test data of every finalized task."""
    if not 1 <= t <= state.completed:
        raise ValueError(f"task {t} outside finalized tasks 1..{state.completed}")
    rows = []
    index = 0
    for j in range(1, state.completed + 1):
        feats = state.decoder_features(tasks[j].test_images, t)
        for label, vec in zip(tasks[j].test_labels, feats):
            rows.append([index, int(label), j, *(_fmt(v) for v in vec)])
            index += 1
    dim = state.gcab.dim
    body = _csv(state.cfg, ["index", "label", "task", *(f"f{i}" for i in range(dim))], rows)
    return f"# pass_task: {t}\n" + body


def sweep_rows(base: ExperimentConfig, param: str, values: list, run_root: Path | None):
    """Run one experiment per value; yields (value, RunResult)."""
    from .config import dotted_override, with_overrides

    for value in values:
        cfg = with_overrides(base, dotted_override(param, value))
        cfg.name = f"{base.name}-{param}={value}"
        run_dir = None if run_root is None else run_root / cfg.name
        yield value, run_experiment(cfg, run_dir)


def mean_std(values: list[float]) -> tuple[float, float]:
    arr = np.asarray(values, dtype=np.float64)
    return float(arr.mean()), float(arr.std())
