"""Command-line entry point.

Exit codes: 0 on success, 1 when the configuration is invalid or missing,
2 when a run fails (divergence, unreadable data, bad checkpoint).
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from .config import ConfigError, RunConfig, load_config
from .engine import TrainingDiverged, evaluate
from .experiment import (
    distill,
    fit_teacher,
    format_sweep,
    make_dataset,
    obtain_teacher,
    sweep,
    teacher_path,
    to_records,
)
from .maps import MapKind
from .metrics import read_metrics, tidy_rows, write_metrics
from .network import load_checkpoint, save_checkpoint
from .scheduler import SchedulerMode

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2


def _parse_seeds(text: str) -> list[int]:
    try:
        seeds = [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"seeds must be comma-separated integers, got {text!r}")
    if not seeds:
        raise argparse.ArgumentTypeError("at least one seed is required")
    return seeds


def _overrides(cfg: RunConfig, args) -> RunConfig:
    if getattr(args, "seed", None) is not None:
        cfg = cfg.with_seed(args.seed)
    if getattr(args, "mode", None):
        cfg = cfg.with_mode(args.mode)
    if getattr(args, "kind", None):
        cfg = cfg.with_kind(args.kind)
    return cfg


def cmd_train_teacher(args) -> int:
    cfg = load_config(args.config)
    data = make_dataset(cfg)
    teacher = fit_teacher(cfg, data)
    loss, acc = evaluate(teacher, *data.test())
    print(f"teacher test accuracy {acc:.4f} (loss {loss:.4f}) -> {teacher_path(cfg)}")
    return EXIT_OK


def cmd_distill(args) -> int:
    cfg = _overrides(load_config(args.config), args)
    data = make_dataset(cfg)
    teacher = obtain_teacher(cfg, data)
    run, results = distill(cfg, teacher, data)
    metrics = Path(args.metrics or cfg.output.metrics)
    metrics.parent.mkdir(parents=True, exist_ok=True)
    write_metrics(metrics, to_records(results))
    ckpt_dir = Path(cfg.output.checkpoint_dir)
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    save_checkpoint(run.student, ckpt_dir / "student.lwdl")
    if results:
        last = results[-1]
        print(f"epoch {last.epoch}: test accuracy {last.test_accuracy:.4f}; metrics -> {metrics}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = load_config(args.config)
    model = load_checkpoint(args.checkpoint)
    data = make_dataset(cfg)
    loss, acc = evaluate(model, *data.test())
    print(f"test loss {loss:.6f} accuracy {acc:.6f}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = load_config(args.config)
    rows = sweep(cfg, args.seeds)
    text = format_sweep(rows)
    if args.out:
        Path(args.out).write_text(text)
    for r in rows:
        print(f"{r.method:10s} {r.scheduler:10s} {100 * r.mean:6.2f} ± {100 * r.std:5.2f}")
    return EXIT_OK


def cmd_plot_data(args) -> int:
    records = read_metrics(args.metrics)
    out = open(args.out, "w", newline="") if args.out else sys.stdout
    try:
        w = csv.writer(out, lineterminator="\n")
        w.writerow(["epoch", "split", "metric", "value"])
        for epoch, split, metric, value in tidy_rows(records):
            w.writerow([epoch, split, metric, repr(float(value))])
    finally:
        if args.out:
            out.close()
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lwdistill", description="Layer-wise learning-rate distillation lab")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("train-teacher", help="train and cache the teacher for a config")
    s.add_argument("config")
    s.set_defaults(func=cmd_train_teacher)

    s = sub.add_parser("distill", help="distil a student and write its metrics CSV")
    s.add_argument("config")
    s.add_argument("--seed", type=int, help="override the student and training seed")
    s.add_argument("--mode", choices=[m.value for m in SchedulerMode])
    s.add_argument("--kind", choices=[k.value for k in MapKind])
    s.add_argument("--metrics", help="metrics CSV path (defaults to output.metrics)")
    s.set_defaults(func=cmd_distill)

    s = sub.add_parser("eval", help="test accuracy of a checkpoint on the config's dataset")
    s.add_argument("checkpoint")
    s.add_argument("config")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("sweep", help="mean and std of final accuracy per method and scheduler")
    s.add_argument("config")
    s.add_argument("--seeds", type=_parse_seeds, required=True)
    s.add_argument("--out", help="write the summary CSV here")
    s.set_defaults(func=cmd_sweep)

    s = sub.add_parser("plot-data", help="long-format CSV from a metrics file")
    s.add_argument("metrics")
    s.add_argument("-o", "--out")
    s.set_defaults(func=cmd_plot_data)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingDiverged as exc:
        print(f"run aborted: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (OSError, ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
