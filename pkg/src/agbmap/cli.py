"""Command-line entry point: one subcommand per pipeline stage.

Exit codes: 0 success, 1 validation error (bad config, missing stage
inputs), 2 runtime failure. Partial stage outputs are removed on failure.
"""

from __future__ import annotations

import argparse
import os
import sys

from .config import ConfigError, load_config, write_default_config
from .pipeline import STAGES, Pipeline, PipelineError


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="agbmap",
        description="Aboveground-biomass mapping pipeline: synthetic scenes, "
                    "LiDAR canopy metrics, stacked ensemble prediction, "
                    "applicability masking, and multi-scale map assessment.",
    )
    parser.add_argument("--config", metavar="PATH",
                        help="run configuration file (key = value sections)")
    parser.add_argument("--threads", type=int, default=None,
                        help="worker cap (falls back to PAGB_THREADS)")
    parser.add_argument("--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", metavar="STAGE")
    for stage in STAGES:
        sub.add_parser(stage, help=f"run the {stage} stage")
    all_p = sub.add_parser("run", help="run every stage in order")
    del all_p
    init = sub.add_parser("init-config", help="write a default config file")
    init.add_argument("path", help="where to write the config")
    return parser


def _resolve_threads(arg_threads: int | None) -> int | None:
    if arg_threads is not None:
        return arg_threads
    env = os.environ.get("PAGB_THREADS")
    if env:
        try:
            return int(env)
        except ValueError as exc:
            raise ConfigError(f"PAGB_THREADS must be an integer, got {env!r}") from exc
    return None


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_help(sys.stderr)
        return 1
    try:
        if args.command == "init-config":
            write_default_config(args.path)
            return 0
        if not args.config:
            raise ConfigError("--config is required")
        cfg = load_config(args.config)
        threads = _resolve_threads(args.threads)
        pipe = Pipeline(cfg, n_threads=threads)
        stages = STAGES if args.command == "run" else (args.command,)
        for stage in stages:
            if args.verbose:
                print(f"[{stage}] running", file=sys.stderr)
            pipe.run_stage(stage)
            if args.verbose:
                print(f"[{stage}] done", file=sys.stderr)
        return 0
    except (ConfigError, PipelineError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # pragma: no cover - defensive
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
