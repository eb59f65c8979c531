"""Command-line entry point: ``gatedcil <subcommand> ...``.

Subcommands::

    train <config>                       full class-incremental run
    eval <checkpoint>                    recompute metrics from stage checkpoints
    distill <checkpoint> --capacity K    compress the decoder into one unmasked block
    export-embeddings <checkpoint> --task T
    report <run-dir>                     summary table plus PNG figures
    sweep <config> --param KEY --values V [V ...]

Exit codes: 0 on success, 1 on runtime or data errors, 2 on usage or
configuration errors (the message names the offending field).
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from pathlib import Path
from typing import Any, Sequence

import yaml

from .autodiff import precision
from .checkpoint import CheckpointError, save_tensors
from .config import ConfigError, ExperimentConfig, dotted_override, load_config, validate_capacity, with_overrides
from .data import DatasetError

log = logging.getLogger("gatedcil")


def _parse_value(text: str) -> Any:
    return yaml.safe_load(text)


def _apply_sets(cfg: ExperimentConfig, sets: Sequence[str]) -> ExperimentConfig:
    for item in sets:
        key, sep, value = item.partition("=")
        if not sep or not key:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        cfg = with_overrides(cfg, dotted_override(key, _parse_value(value)))
    return cfg


def _load(args: argparse.Namespace) -> ExperimentConfig:
    cfg = _apply_sets(load_config(args.config), args.set or [])
    if getattr(args, "seed", None) is not None:
        cfg = with_overrides(cfg, {"seed": args.seed})
    return cfg


def _print_summary(rows: list[tuple[str, float]], out=None) -> None:
    out = out or sys.stdout
    width = max(len(name) for name, _ in rows)
    for name, value in rows:
        out.write(f"{name:<{width}}  {value:8.3f}\n")


# -- subcommands -----------------------------------------------------------------------


def cmd_train(args: argparse.Namespace) -> int:
    from .runner import default_run_dir, run_experiment

    cfg = _load(args)
    run_dir = Path(args.out) if args.out else default_run_dir(cfg)
    result = run_experiment(cfg, run_dir, checkpoints=not args.no_checkpoints, num_tasks=args.num_tasks)
    print(f"run directory: {run_dir}  ({result.seconds:.1f}s)")
    _print_summary(result.report.summary_rows()[:3])
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    from .runner import capacity_csv, evaluate_checkpoint, metrics_csv, summary_csv

    cfg, matrix, report, capacity_log = evaluate_checkpoint(args.checkpoint)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "metrics.csv").write_text(metrics_csv(cfg, matrix), encoding="utf-8")
        (out / "summary.csv").write_text(summary_csv(cfg, report, capacity_log), encoding="utf-8")
        (out / "capacity.csv").write_text(capacity_csv(cfg, capacity_log), encoding="utf-8")
    _print_summary(report.summary_rows())
    return 0


def _distill_history_csv(cfg: ExperimentConfig, capacity: float, history: list[dict[str, float]]) -> str:
    buf = io.StringIO()
    buf.write(f"# config_hash: {cfg.config_hash()}\n# seed: {cfg.seed}\n# capacity: {capacity!r}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["epoch", "kl", "train_acc"])
    writer.writerows([[h["epoch"], repr(h["kl"]), repr(h["train_acc"])] for h in history])
    return buf.getvalue()


def cmd_distill(args: argparse.Namespace) -> int:
    import dataclasses

    from .distill import distill
    from .runner import checkpoint_precision, load_for_inference

    capacity = validate_capacity(args.capacity)
    with precision(checkpoint_precision(args.checkpoint)):
        state, tasks, _ = load_for_inference(args.checkpoint)
        dcfg = dataclasses.replace(state.cfg.distill, capacity=capacity)
        if args.epochs is not None:
            dcfg = dataclasses.replace(dcfg, epochs=args.epochs)
        result = distill(state, tasks, dcfg)
    ckpt = Path(args.checkpoint)
    out = Path(args.out) if args.out else ckpt.parent.parent / f"distill_k{capacity:g}"
    out.mkdir(parents=True, exist_ok=True)
    student = result.student
    tensors = {"block." + k: v for k, v in student.block.state_dict().items()}
    tensors.update({"head." + k: v for k, v in student.head.state_dict().items()})
    tensors["static.m_i"], tensors["static.m_2"] = student._static
    meta = {"config": state.cfg.to_dict(), "config_hash": state.cfg.config_hash(), "seed": state.cfg.seed,
            "capacity": capacity, "teacher": str(ckpt), "completed": state.completed,
            "student_tag": result.student_tag, "teacher_tag": result.teacher_tag,
            "student_flops": result.student_flops, "plain_flops": result.plain_flops}
    save_tensors(out / "student.ckpt", tensors, meta)
    (out / "distill.csv").write_text(_distill_history_csv(state.cfg, capacity, result.history), encoding="utf-8")
    print(f"student ACC_TAG {result.student_tag:.3f}  teacher ACC_TAG {result.teacher_tag:.3f}")
    print(f"per-image ops: student {result.student_flops}  mask-free decoder {result.plain_flops}")
    print(f"parameters: teacher {result.teacher_parameters}  student {result.student_parameters}")
    print(f"wrote {out / 'student.ckpt'}")
    return 0


def cmd_export(args: argparse.Namespace) -> int:
    from .runner import checkpoint_precision, embeddings_csv, load_for_inference

    with precision(checkpoint_precision(args.checkpoint)):
        state, tasks, _ = load_for_inference(args.checkpoint)
        text = embeddings_csv(state, tasks, args.task)
    out = Path(args.out) if args.out else Path(args.checkpoint).with_name(f"embeddings_task{args.task}.csv")
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(text, encoding="utf-8")
    print(f"wrote {out}")
    return 0


def cmd_report(args: argparse.Namespace) -> int:
    from .metrics import AccuracyMatrix, metrics
    from .plotting import render_report
    from .runner import read_csv

    run_dir = Path(args.run_dir)
    stages_path = run_dir / "stages.json"
    if not stages_path.is_file():
        raise FileNotFoundError(f"{run_dir}: no stages.json; is this a train output directory?")
    payload = json.loads(stages_path.read_text(encoding="utf-8"))
    matrix = AccuracyMatrix.from_list(payload["stages"])
    report = metrics(matrix)
    capacity_log: list[dict[str, float]] = []
    cap_path = run_dir / "capacity.csv"
    if cap_path.is_file():
        for row in read_csv(cap_path)[1]:
            t = int(row["task_index"])
            while len(capacity_log) < t:
                capacity_log.append({})
            capacity_log[t - 1][row["component"]] = float(row["capacity_fraction"])
    rows = report.summary_rows()
    buf = io.StringIO()
    buf.write(f"# config_hash: {payload['config_hash']}\n# seed: {payload['seed']}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["metric", "value"])
    writer.writerows([[name, repr(float(value))] for name, value in rows])
    (run_dir / "report.csv").write_text(buf.getvalue(), encoding="utf-8")
    _print_summary(rows)
    if not args.no_plots:
        for path in render_report(matrix, report, capacity_log, run_dir):
            print(f"wrote {path}")
    return 0


def cmd_sweep(args: argparse.Namespace) -> int:
    from .runner import default_run_dir, mean_std, sweep_rows

    base = _load(args)
    values = [_parse_value(v) for v in args.values]
    with_overrides(base, dotted_override(args.param, values[0]))  # fail fast on a bad key
    root = Path(args.out) if args.out else default_run_dir(base).with_name(f"{base.name}-sweep")
    seeds = args.seeds or [base.seed]
    rows = []
    for seed in seeds:
        seeded = with_overrides(base, {"seed": seed, "name": f"{base.name}-s{seed}"})
        for value, result in sweep_rows(seeded, args.param, values, root):
            r = result.report
            rows.append([seed, value, r.acc_tag, r.acc_taw, r.acc_avg])
            print(f"seed {seed}  {args.param}={value}  ACC_TAG {r.acc_tag:.3f}  ACC_TAW {r.acc_taw:.3f}")
    buf = io.StringIO()
    buf.write(f"# config_hash: {base.config_hash()}\n# seed: {' '.join(str(s) for s in seeds)}\n")
    buf.write(f"# param: {args.param}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["seed", "value", "ACC_TAG", "ACC_TAW", "ACC_AVG"])
    writer.writerows([[s, v, repr(a), repr(b), repr(c)] for s, v, a, b, c in rows])
    writer.writerow([])
    writer.writerow(["value", "ACC_TAG_mean", "ACC_TAG_std", "ACC_TAW_mean", "ACC_TAW_std"])
    for value in values:
        tag = [r[2] for r in rows if r[1] == value]
        taw = [r[3] for r in rows if r[1] == value]
        writer.writerow([value, *(repr(x) for x in (*mean_std(tag), *mean_std(taw)))])
    root.mkdir(parents=True, exist_ok=True)
    (root / "sweep.csv").write_text(buf.getvalue(), encoding="utf-8")
    print(f"wrote {root / 'sweep.csv'}")
    return 0


# -- parser -----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gatedcil", description=__doc__.split("\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-stage progress")
    sub = parser.add_subparsers(dest="command", metavar="command")
    sub.required = True

    def config_args(p: argparse.ArgumentParser) -> None:
        p.add_argument("config", help="YAML or JSON experiment config")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config field, e.g. train.lr=1e-4")
        p.add_argument("--out", help="output directory (default: $GATEDCIL_OUTPUT_ROOT or output_dir, plus name)")

    p = sub.add_parser("train", help="run every task of a config and write CSVs and checkpoints")
    config_args(p)
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--num-tasks", type=int, help="stop after this many tasks")
    p.add_argument("--no-checkpoints", action="store_true", help="skip per-task checkpoints")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="recompute metrics from a train checkpoint")
    p.add_argument("checkpoint", help="checkpoints/task_<t>.ckpt from a train run")
    p.add_argument("--out", help="directory for recomputed metrics/summary/capacity CSVs")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("distill", help="distill the gated decoder into one unmasked block")
    p.add_argument("checkpoint")
    p.add_argument("--capacity", type=float, default=1.0, help="fraction of active units in the static masks, (0, 1]")
    p.add_argument("--epochs", type=int, help="override distill.epochs")
    p.add_argument("--out", help="output directory (default: <run>/distill_k<capacity>)")
    p.set_defaults(func=cmd_distill)

    p = sub.add_parser("export-embeddings", help="dump decoder outputs of one task pass as CSV")
    p.add_argument("checkpoint")
    p.add_argument("--task", type=int, required=True, help="task pass whose features are exported")
    p.add_argument("--out", help="output CSV path")
    p.set_defaults(func=cmd_export)

    p = sub.add_parser("report", help="summary table and figures for a run directory")
    p.add_argument("run_dir")
    p.add_argument("--no-plots", action="store_true", help="write report.csv only")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("sweep", help="one run per value of a config field (CSV output only)")
    config_args(p)
    p.add_argument("--param", required=True, help="dotted config key, e.g. train.lambda_pfr")
    p.add_argument("--values", nargs="+", required=True)
    p.add_argument("--seeds", type=int, nargs="+", help="repeat the sweep for each seed")
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (CheckpointError, DatasetError, FileNotFoundError, ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
