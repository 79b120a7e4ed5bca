"""Command-line entry points.

Commands: train, sweep, evaluate, report, plot. Configs are JSON files;
command-line flags override config fields (flag > file > default). The runs
root defaults to ./runs and can be overridden with --out or the
SELEKT_RUNS_DIR environment variable.

Exit codes: 0 success, 1 usage or config error, 2 runtime failure (including
a diverged training run). Error lines go to stderr as "error: <category>:
<message>".
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace
from pathlib import Path

from .data import load_dataset, materialize_dataset
from .evals import (
    EVAL_KINDS,
    attach_evaluation,
    evaluate_attacks,
    evaluate_corruptions,
    evaluate_dims,
    evaluate_jacobian,
)
from .attacks import AttackSpec, DEFAULT_PGD_STEP_SIZE, DEFAULT_PGD_STEPS
from .exceptions import ConfigError, DivergedRunError
from .harness import (
    RECORD_FILENAME,
    RunRecord,
    TrainConfig,
    next_run_id,
    read_record,
    run_sweep,
    train,
)
from .plotting import FIGURE_FAMILIES, plot_figure
from .reporting import build_summary, load_summary, write_summary

ENV_RUNS_DIR = "SELEKT_RUNS_DIR"


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # exit 1 instead of argparse's default 2
        raise _UsageError(message)


def _runs_root(value) -> Path:
    return Path(value or os.environ.get(ENV_RUNS_DIR) or "runs")


def _load_train_config(path) -> TrainConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        with open(path) as fh:
            payload = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    return TrainConfig.from_dict(payload)


def _apply_overrides(config: TrainConfig, args) -> TrainConfig:
    if getattr(args, "alpha", None) is not None:
        config = replace(config, alpha=args.alpha)
        config.regularizer = replace(config.regularizer, alpha=args.alpha)
    if getattr(args, "seed", None) is not None:
        config = replace(config, seed=args.seed)
    return config.validate()


def _find_run(runs_root: Path, run_id: str) -> RunRecord:
    run_dir = runs_root / run_id
    if not (run_dir / RECORD_FILENAME).exists():
        raise ConfigError(f"run not found: {run_id} under {runs_root}")
    return read_record(run_dir)


# ------------------------------------------------------------------ commands


def cmd_train(args) -> int:
    config = _apply_overrides(_load_train_config(args.config), args)
    runs_root = _runs_root(args.out)
    runs_root.mkdir(parents=True, exist_ok=True)
    run_id = next_run_id(runs_root, config)
    run_dir = runs_root / run_id
    if args.materialize:
        materialize_dataset(load_dataset(config.dataset), run_dir / "dataset")
    record = train(config, run_dir=run_dir, run_id=run_id)
    print(f"run {record.run_id}: {record.status} "
          f"(best_epoch={record.best_epoch}, test_acc={record.test_accuracy})")
    print(str(run_dir))
    if record.status != "completed":
        raise DivergedRunError(f"run {record.run_id} {record.status}")
    return 0


def _parse_grid(text, kind=float):
    try:
        return [kind(tok) for tok in text.split(",") if tok.strip() != ""]
    except ValueError as exc:
        raise ConfigError(f"bad grid value in {text!r}: {exc}") from exc


def cmd_sweep(args) -> int:
    base = _load_train_config(args.config)
    alphas = _parse_grid(args.alphas, float)
    seeds = _parse_grid(args.seeds, int)
    if not alphas or not seeds:
        raise ConfigError("alphas and seeds must be non-empty")
    runs_root = _runs_root(args.out)
    records = run_sweep(base, alphas, seeds, runs_root)
    for record in records:
        print(f"run {record.run_id}: alpha={record.config.alpha:g} "
              f"seed={record.config.seed} status={record.status}")
    if not any(r.status == "completed" for r in records):
        raise RuntimeError("all sweep runs failed or diverged")
    return 0


def cmd_evaluate(args) -> int:
    runs_root = _runs_root(args.runs)
    record = _find_run(runs_root, args.run)
    if record.status != "completed":
        raise DivergedRunError(f"cannot evaluate diverged run {record.run_id}"
                               if record.status == "diverged"
                               else f"cannot evaluate {record.status} run {record.run_id}")
    model = record.load_model()
    test = load_dataset(record.config.dataset).test
    seed = record.config.seed
    if args.kind == "attack":
        if args.method is not None:
            if args.eps is None:
                raise ConfigError("--method requires --eps")
            if args.method == "fgsm":
                specs = [AttackSpec("fgsm", args.eps)]
            else:
                specs = [AttackSpec(
                    "pgd", args.eps,
                    args.step_size if args.step_size is not None else DEFAULT_PGD_STEP_SIZE,
                    args.steps if args.steps is not None else DEFAULT_PGD_STEPS,
                )]
            for spec in specs:
                spec.validate()
            payload = evaluate_attacks(model, test, specs=specs)
        else:
            payload = evaluate_attacks(model, test)
    elif args.kind == "corrupt":
        payload = evaluate_corruptions(model, test, seed=seed, benchmark_root=args.benchmark_root)
    elif args.kind == "dims":
        which = {
            None: ("clean", "corruption_diff", "adversarial_diff"),
            "all": ("clean", "corruption_diff", "adversarial_diff"),
            "clean": ("clean",),
            "pgd25": ("clean", "adversarial_diff"),
            "motion_blur_s3": ("clean", "corruption_diff"),
        }.get(args.perturbation)
        if which is None:
            raise ConfigError(f"unknown dims perturbation: {args.perturbation!r}")
        samples = args.samples if args.samples is not None else 2000
        payload = evaluate_dims(model, test, seed=seed, which=which, max_samples=samples)
    elif args.kind == "jacobian":
        samples = args.samples if args.samples is not None else 500
        payload = evaluate_jacobian(model, test, max_samples=samples, norm_kind=args.norm)
    else:
        raise ConfigError(f"unknown evaluation kind: {args.kind!r}")
    attach_evaluation(record, args.kind, payload)
    print(f"run {record.run_id}: {args.kind} evaluation attached")
    return 0


def cmd_report(args) -> int:
    runs_root = _runs_root(args.runs)
    if not runs_root.exists():
        raise ConfigError(f"runs directory not found: {runs_root}")
    run_dirs = sorted(p for p in runs_root.iterdir()
                      if p.is_dir() and (p / RECORD_FILENAME).exists())
    if not run_dirs:
        raise ConfigError(f"no runs under {runs_root}")
    records = [read_record(p) for p in run_dirs]
    summary = build_summary(records)
    paths = write_summary(summary, records, args.out)
    for name, path in paths.items():
        print(f"{name}: {path}")
    return 0


def cmd_plot(args) -> int:
    path = Path(args.summary)
    if not path.exists():
        raise ConfigError(f"summary file not found: {path}")
    summary = load_summary(path)
    out_dir = Path(args.out) if args.out else path.parent
    written = plot_figure(summary, args.fig, out_dir, kind=args.kind)
    for p in written:
        print(str(p))
    return 0


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="selekt",
                     description="class-selectivity robustness experiment harness")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one model from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--alpha", type=float, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default=None)
    p.add_argument("--materialize", action="store_true",
                   help="cache the dataset to the local uint8 layout inside the run dir")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sweep", help="train a grid of (alpha, seed) runs")
    p.add_argument("--config", required=True)
    p.add_argument("--alphas", required=True, help="comma-separated; use --alphas=-2,0,2 for negative values")
    p.add_argument("--seeds", required=True, help="comma-separated, e.g. 0,1,2,3,4")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("evaluate", help="attach an evaluation to a completed run")
    p.add_argument("--run", required=True)
    p.add_argument("--kind", required=True, choices=EVAL_KINDS)
    p.add_argument("--runs", default=None)
    p.add_argument("--method", choices=("fgsm", "pgd"), default=None)
    p.add_argument("--eps", type=float, default=None)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--step-size", dest="step_size", type=float, default=None)
    p.add_argument("--benchmark-root", dest="benchmark_root", default=None)
    p.add_argument("--perturbation", default=None,
                   help="dims: all | clean | pgd25 | motion_blur_s3")
    p.add_argument("--samples", type=int, default=None)
    p.add_argument("--norm", choices=("fro", "spectral"), default="fro")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("report", help="aggregate runs into summary JSON + CSV")
    p.add_argument("--runs", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("plot", help="emit a figure family from a summary")
    p.add_argument("--summary", required=True)
    p.add_argument("--fig", required=True, choices=FIGURE_FAMILIES)
    p.add_argument("--kind", default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_plot)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args) or 0
    except _UsageError as exc:
        print(f"error: usage: {exc}", file=sys.stderr)
        return 1
    except ConfigError as exc:
        print(f"error: config: {exc}", file=sys.stderr)
        return 1
    except DivergedRunError as exc:
        print(f"error: runtime: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # anything else is a runtime failure
        print(f"error: runtime: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
