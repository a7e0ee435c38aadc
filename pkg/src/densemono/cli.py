"""Command line entry point: ``densemono {run,evaluate,export,print-config,synth}``."""
from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

from .config import PipelineConfig, apply_env, format_config, load_config, save_config
from .errors import SlamError

logger = logging.getLogger("densemono")


def _cmd_run(args) -> int:
    from .pipeline import run

    cfg = load_config(args.config, os.environ)
    if args.output:
        cfg = replace(cfg, output=args.output)
    arts = run(cfg)
    print(f"{len(arts.frames)} frames, {len(arts.keyframes)} key-frames -> {arts.out_dir}")
    return 0


def _cmd_evaluate(args) -> int:
    from .pipeline import evaluate

    metrics = evaluate(args.run, args.gt, args.align, args.associations, figures=not args.no_figures)
    for key, value in metrics.rows():
        print(f"{key}\t{value}")
    return 0


def _cmd_export(args) -> int:
    from .pipeline import export

    path = export(args.run, args.mode, args.out)
    print(path)
    return 0


def _cmd_print_config(args) -> int:
    cfg = load_config(args.config, os.environ) if args.config else apply_env(PipelineConfig(), os.environ)
    sys.stdout.write(format_config(cfg))
    return 0


def _cmd_synth(args) -> int:
    from .synthetic import loop_trajectory, pan_trajectory, write_tum_sequence

    poses = loop_trajectory(args.frames, args.radius) if args.kind == "loop" else pan_trajectory(args.frames, args.pan_deg)
    out = Path(args.out)
    write_tum_sequence(out, poses, prediction_blur=args.blur, prediction_bias=args.bias, seed=args.seed)
    cfg = PipelineConfig(dataset=".", prediction_dir="predictions", output="run", seed=args.seed)
    save_config(cfg, out / "config.txt")
    print(out / "config.txt")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="densemono", description="Monocular dense SLAM with predicted depth.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="process a sequence")
    r.add_argument("--config", required=True)
    r.add_argument("--output", help="override the output directory")
    r.set_defaults(func=_cmd_run)

    e = sub.add_parser("evaluate", help="score a run against ground truth")
    e.add_argument("--run", required=True)
    e.add_argument("--gt", required=True)
    e.add_argument("--align", choices=("none", "rigid"), default="rigid")
    e.add_argument("--associations", default="associations.txt")
    e.add_argument("--no-figures", action="store_true")
    e.set_defaults(func=_cmd_evaluate)

    x = sub.add_parser("export", help="write the global model as PLY")
    x.add_argument("--run", required=True)
    x.add_argument("--mode", choices=("rgb", "label"), default="rgb")
    x.add_argument("--out")
    x.set_defaults(func=_cmd_export)

    c = sub.add_parser("print-config", help="print every configuration key")
    c.add_argument("--config")
    c.set_defaults(func=_cmd_print_config)

    s = sub.add_parser("synth", help="render a synthetic sequence with degraded-GT predictions")
    s.add_argument("--out", required=True)
    s.add_argument("--kind", choices=("loop", "pan"), default="loop")
    s.add_argument("--frames", type=int, default=50)
    s.add_argument("--radius", type=float, default=0.3)
    s.add_argument("--pan-deg", type=float, default=45.0)
    s.add_argument("--blur", type=float, default=3.0)
    s.add_argument("--bias", type=float, default=1.0)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=_cmd_synth)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.verbose:
        logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except SlamError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
