"""Command-line entry point.

BLAS thread pools are pinned to one thread before numpy loads: matrix-product
reductions reorder under multithreading, and the pipeline promises bit-identical
artifacts regardless of the ambient thread settings.
"""
import os

for _var in (
    "OMP_NUM_THREADS",
    "OPENBLAS_NUM_THREADS",
    "MKL_NUM_THREADS",
    "NUMEXPR_NUM_THREADS",
    "VECLIB_MAXIMUM_THREADS",
):
    os.environ[_var] = "1"

import argparse
import logging
import sys
from pathlib import Path

from . import commands


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dynsplat",
        description="Desk-scale dynamic Gaussian splatting pipeline.",
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic oracle bundle")
    p.add_argument("scene_spec", type=Path, help="scene spec file (preset, seed)")
    p.add_argument("out_dir", type=Path)

    for name, help_text in (
        ("masks", "motion masks and dynamic-object selection"),
        ("depth", "depth refinement against the mono prior"),
        ("tracks", "seed sampling and track re-identification"),
        ("reconstruct", "scaffold lifting and splat optimization"),
    ):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("in_dir", type=Path)
        p.add_argument("out_dir", type=Path)
        p.add_argument("--config", type=Path, default=None, help="pipeline config file")

    p = sub.add_parser("render", help="render a checkpoint along a trajectory")
    p.add_argument("checkpoint_dir", type=Path)
    p.add_argument("trajectory", help="camera file path or orbit:<count>[:<radius scale>]")
    p.add_argument("out_dir", type=Path)

    p = sub.add_parser("eval", help="PSNR / SSIM / depth-MAE against the oracle")
    p.add_argument("render_dir", type=Path)
    p.add_argument("oracle_dir", type=Path)
    p.add_argument("--out", type=Path, default=None, help="report directory (default: render dir)")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        if args.command == "synth":
            commands.cmd_synth(args.scene_spec, args.out_dir)
        elif args.command in ("masks", "depth", "tracks", "reconstruct"):
            cfg = commands.load_config(args.config)
            handler = getattr(commands, f"cmd_{args.command}")
            handler(args.in_dir, args.out_dir, cfg)
        elif args.command == "render":
            commands.cmd_render(args.checkpoint_dir, args.trajectory, args.out_dir)
        elif args.command == "eval":
            report = commands.cmd_eval(args.render_dir, args.oracle_dir, args.out)
            sys.stdout.write(report)
    except Exception as exc:  # one machine-parsable line, nonzero exit
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
