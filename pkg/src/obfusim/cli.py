"""Command-line entry point.

Usage: obfusim <stage> [--config FILE] [--seed N] [--scale desk|paper]
       [--out DIR] [--force]

Exit codes: 0 success, 2 config problem, 3 missing upstream artifacts.
"""

from __future__ import annotations

import argparse
import sys

from .config import load_config
from .pipeline import STAGE_ORDER, MissingArtifactError, run_pipeline
from .universe import ConfigError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_MISSING = 3


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="obfusim",
        description="Synthetic tracker ecosystem with an RL-driven "
                    "browsing-obfuscation agent and baselines.")
    parser.add_argument("stage", choices=list(STAGE_ORDER) + ["all"],
                        help="pipeline stage to run ('all' runs every stage in order)")
    parser.add_argument("--config", metavar="FILE", default=None,
                        help="JSON config; unset keys fall back to the scale preset")
    parser.add_argument("--seed", type=int, default=None,
                        help="override the run seed")
    parser.add_argument("--scale", choices=["desk", "paper"], default=None,
                        help="preset to start from (default: desk)")
    parser.add_argument("--out", metavar="DIR", default="runs/default",
                        help="run directory for artifacts (default: runs/default)")
    parser.add_argument("--force", action="store_true",
                        help="re-run the stage even when its artifacts are current")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, cli_seed=args.seed, cli_scale=args.scale)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    stages = list(STAGE_ORDER) if args.stage == "all" else [args.stage]
    try:
        run_pipeline(stages, cfg, args.out, force=args.force)
    except MissingArtifactError as exc:
        print(f"missing artifacts: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
