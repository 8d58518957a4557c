"""Command line front end.

Exit codes: 0 success, 2 invalid input (config, geometry, missing artifacts),
3 solver non-convergence, 1 anything else.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import __version__
from .cg import SolverNotConverged
from .config import STAGES, ConfigError, parse_config
from .pipeline import StageError, report_summary, run_pipeline

EXIT_OK, EXIT_ERROR, EXIT_INVALID, EXIT_NONCONVERGED = 0, 1, 2, 3


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, required=True, help="experiment config file")
    common.add_argument("--out", type=Path, help="output directory (overrides [output] dir)")
    common.add_argument("--threads", type=int, default=1, help="worker threads for walks")
    common.add_argument("-v", "--verbose", action="store_true")
    parser = argparse.ArgumentParser(prog="clusterwalk",
                                     description="Random walk on percolation clusters")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in STAGES:
        sub.add_parser(name, parents=[common], help=f"run the {name} stage")
    sub.add_parser("all", parents=[common], help="run the stages listed in the config")
    return parser


def _root_cause(exc: BaseException) -> BaseException:
    while exc.__cause__ is not None:
        exc = exc.__cause__
    return exc


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return EXIT_INVALID
    try:
        cfg = parse_config(args.config.read_text(encoding="utf-8"))
    except OSError as exc:
        print(f"error: cannot read config: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except ConfigError as exc:
        print(f"error: {args.config}: {exc}", file=sys.stderr)
        return EXIT_INVALID
    out = args.out or Path(cfg.dir)
    stages = None if args.command == "all" else [args.command]
    try:
        manifest = run_pipeline(cfg, out, threads=args.threads, stages=stages)
    except StageError as exc:
        cause = _root_cause(exc)
        print(f"error: {exc}", file=sys.stderr)
        if isinstance(cause, SolverNotConverged):
            return EXIT_NONCONVERGED
        if cause is exc or isinstance(cause, (ValueError, OSError)):
            return EXIT_INVALID
        return EXIT_ERROR
    if "report" in (stages or cfg.stages):
        sys.stdout.write(report_summary(manifest))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
