"""Command-line surface: generate / run / eval / report."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .data import SyntheticDataConfig, generate_synthetic, save_dataset
from .experiment import (ConfigError, config_hash, evaluate_checkpoint, format_report,
                         load_config, parse_config, run_experiment)
from .model import CheckpointError

import yaml


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="auxseg",
                                     description="Auxiliary-task assisted segmentation training")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("generate", help="write a synthetic dataset to disk")
    gen.add_argument("--out", required=True, help="target dataset directory")
    gen.add_argument("--config", help="experiment config; uses its data.synthetic section")
    gen.add_argument("--count", type=int, default=340)
    gen.add_argument("--height", type=int, default=64)
    gen.add_argument("--width", type=int, default=64)
    gen.add_argument("--shapes-min", type=int, default=1)
    gen.add_argument("--shapes-max", type=int, default=3)
    gen.add_argument("--noise-std", type=float, default=0.05)
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--force", action="store_true", help="overwrite an existing dataset")

    run = sub.add_parser("run", help="run the full two-stage pipeline")
    run.add_argument("--config", required=True)
    run.add_argument("--force", action="store_true", help="discard a previous run in output_dir")
    run.add_argument("--resume", action="store_true", help="skip phases with a DONE marker")
    run.add_argument("--workers", type=int, default=1, help="parallel stage-1 task jobs")

    ev = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    ev.add_argument("checkpoint")
    ev.add_argument("--config", help="experiment config describing the dataset and split")
    ev.add_argument("--data", help="dataset directory (images/ + masks/)")
    ev.add_argument("--fractions", type=float, nargs=3, metavar=("TRAIN", "VAL", "TEST"))
    ev.add_argument("--seed", type=int, help="split shuffle seed")
    ev.add_argument("--split", default="test", choices=("train", "val", "test", "all"))

    rep = sub.add_parser("report", help="pretty-print a stored experiment report")
    rep.add_argument("path", help="experiment dir or report.json")
    return parser


def _cmd_generate(args) -> int:
    if args.config:
        cfg = load_config(args.config)
        if cfg.data.synthetic is None:
            raise ConfigError("config has no data.synthetic section to generate from")
        syn = cfg.data.synthetic
    else:
        syn = SyntheticDataConfig(count=args.count, height=args.height, width=args.width,
                                  shapes_min=args.shapes_min, shapes_max=args.shapes_max,
                                  noise_std=args.noise_std, seed=args.seed)
    samples = generate_synthetic(syn)
    save_dataset(samples, args.out, force=args.force)
    print(f"wrote {len(samples)} image/mask pairs to {args.out}")
    return 0


def _cmd_run(args) -> int:
    cfg = load_config(args.config)
    report = run_experiment(cfg, resume=args.resume, force=args.force, workers=args.workers)
    print(format_report(report))
    print(f"report: {Path(cfg.output_dir) / 'report.json'}")
    return 0


def _cmd_eval(args) -> int:
    fractions = tuple(args.fractions) if args.fractions else None
    dice = evaluate_checkpoint(args.checkpoint, config=args.config, data_dir=args.data,
                               fractions=fractions, seed=args.seed, part=args.split)
    print(f"{args.split} dice: {dice:.6f}")
    return 0


def _cmd_report(args) -> int:
    path = Path(args.path)
    report_path = path / "report.json" if path.is_dir() else path
    if not report_path.exists():
        raise FileNotFoundError(f"no report found at {report_path}")
    report = json.loads(report_path.read_text())
    print(format_report(report))
    stored_config = report_path.parent / "config.yaml"
    if stored_config.exists():
        stored_hash = config_hash(parse_config(yaml.safe_load(stored_config.read_text())))
        if stored_hash != report.get("config_hash"):
            print("warning: stored config hash does not match the report", file=sys.stderr)
    return 0


_HANDLERS = {
    "generate": _cmd_generate,
    "run": _cmd_run,
    "eval": _cmd_eval,
    "report": _cmd_report,
}


def main(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return _HANDLERS[args.command](args)
    except (ConfigError, CheckpointError, FileNotFoundError, FileExistsError,
            ValueError, RuntimeError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
