"""Command-line entry point: ``gradleak <subcommand> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import torch

from .config import RunConfig, load_config, load_sweep
from .data import read_image
from .errors import GradLeakError
from .metrics import evaluate


def _overrides(args) -> dict:
    updates = {}
    if args.seed is not None:
        updates["run.master_seed"] = args.seed
    if args.out is not None:
        updates["run.output_dir"] = args.out
    if args.precision is not None:
        updates["run.precision"] = args.precision
    return updates


def _config(args) -> RunConfig:
    return load_config(args.config).with_updates(_overrides(args))


def cmd_train_diffusion(args):
    from .runner import load_datasets, prepare_diffusion

    cfg = _config(args)
    path = cfg["diffusion.checkpoint"] or str(Path(cfg["run.output_dir"]) / "diffusion.bin")
    if Path(path).exists():
        Path(path).unlink()
    cfg = cfg.with_updates({"diffusion.checkpoint": path})
    public, _ = load_datasets(cfg, torch.float64)
    _, info = prepare_diffusion(cfg, public)
    print(json.dumps(info, indent=2))


def _print_summary(out):
    summary = json.loads((Path(out) / "summary.json").read_text())
    agg = summary.get("aggregate", {})
    print(f"run directory: {out}")
    print("final " + " ".join(f"{k}={v:.6g}" for k, v in agg.items()))


def cmd_attack(args):
    from .runner import run

    _print_summary(run(_config(args)))


def cmd_defend(args):
    from .runner import run

    cfg = _config(args).with_updates({"defense.family": args.family, "defense.variance": args.variance})
    _print_summary(run(cfg))


def cmd_sweep(args):
    from .runner import SWEEP_COLUMNS, sweep

    spec = load_sweep(args.config)
    updates = _overrides(args)
    if updates:
        spec = type(spec)(spec.axis, spec.values, spec.base.with_updates(updates), spec.mode, spec.workers)
    rows = sweep(spec, workers=args.workers)
    print(",".join(SWEEP_COLUMNS))
    for row in rows:
        print(",".join(str(row[c]) for c in SWEEP_COLUMNS))
    if any(not str(r["status"]).startswith("ok") for r in rows):
        return 3


def cmd_report(args):
    from .runner import report

    for path in report(args.run_dir):
        print(path)


def cmd_metrics(args):
    a, b = read_image(args.image_a), read_image(args.image_b)
    print(json.dumps(evaluate(a, b, image_id=str(args.image_a)).as_dict(), indent=2))


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, help="overrides run.master_seed")
    common.add_argument("--out", help="overrides run.output_dir")
    common.add_argument("--precision", choices=("single", "double"), help="overrides run.precision")
    common.add_argument("--workers", type=int, help="concurrent sweep runs (overrides sweep.workers)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="gradleak", description="Gradient leakage attacks at desk scale.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train-diffusion", parents=[common], help="train the toy diffusion model and save it")
    p.add_argument("config")
    p.set_defaults(func=cmd_train_diffusion, stage="train-diffusion")

    p = sub.add_parser("attack", parents=[common], help="run one attack (method from the config)")
    p.add_argument("config")
    p.set_defaults(func=cmd_attack, stage="attack")

    p = sub.add_parser("defend", parents=[common], help="run an attack against a noised gradient")
    p.add_argument("config")
    p.add_argument("--variance", type=float, required=True)
    p.add_argument("--family", choices=("gaussian", "laplacian"), default="gaussian")
    p.set_defaults(func=cmd_defend, stage="defend")

    p = sub.add_parser("sweep", parents=[common], help="run a one-axis ablation sweep")
    p.add_argument("config")
    p.set_defaults(func=cmd_sweep, stage="sweep")

    p = sub.add_parser("report", parents=[common], help="re-render a run's summary and curves")
    p.add_argument("run_dir")
    p.set_defaults(func=cmd_report, stage="report")

    p = sub.add_parser("metrics", parents=[common], help="compare two image files")
    p.add_argument("image_a")
    p.add_argument("image_b")
    p.set_defaults(func=cmd_metrics, stage="metrics")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args) or 0
    except GradLeakError as exc:
        stage = getattr(exc, "stage", args.stage)
        print(f"gradleak: error in stage {stage}: {exc.__cause__ or exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"gradleak: error in stage {args.stage}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
