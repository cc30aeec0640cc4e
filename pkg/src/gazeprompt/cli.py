"""Command-line entry point: ``gazeprompt {ingest,render,classify,evaluate,run}``.

Exit codes: 0 success, 1 validation error, 2 partial stage failure,
3 total stage failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from . import __version__
from .config import load_config
from .errors import ConfigError, GazePromptError
from .pipeline import (
    EXIT_CODES,
    RunContext,
    cmd_classify,
    cmd_evaluate,
    cmd_ingest,
    cmd_render,
    cmd_run,
    manifest_exit_code,
    update_manifest,
)

EXIT_OK, EXIT_VALIDATION, EXIT_PARTIAL, EXIT_FAILED = 0, 1, 2, 3


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, type=Path, help="experiment YAML file")
    common.add_argument("--out", type=Path, default=None, help="run directory (overrides paths.out)")
    common.add_argument("--seed", type=int, default=None, help="master seed (overrides config)")
    common.add_argument("--workers", type=int, default=None, help="parallel workers within a stage")
    common.add_argument("--dry-run", action="store_true", help="print the plan without writing files")
    common.add_argument("--force", action="store_true", help="redo work even when outputs are up to date")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="gazeprompt", description="Gaze-overlay visual prompting pipeline.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("ingest", parents=[common], help="parse gaze logs and probes into labelled segments")
    render = sub.add_parser("render", parents=[common], help="composite gaze onto frames and build clips")
    render.add_argument("--segments", default=None, help="comma-separated segment ids to render")
    classify = sub.add_parser("classify", parents=[common], help="prompt the model backend")
    classify.add_argument("--strategy", default=None, help="run a single configured strategy")
    sub.add_parser("evaluate", parents=[common], help="score predictions against baselines")
    sub.add_parser("run", parents=[common], help="all stages in order")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, out=args.out, seed=args.seed, workers=args.workers)
        cfg.validate()
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION

    ctx = RunContext(cfg, force=args.force, dry_run=args.dry_run)
    try:
        if args.command == "run":
            manifest = cmd_run(ctx)
            for s in manifest.stages:
                print(f"{s.name:<9} {s.status:<8} {s.message}")
            for name in manifest.not_attempted:
                print(f"{name:<9} not attempted")
            return manifest_exit_code(manifest)
        if args.command == "ingest":
            result = cmd_ingest(ctx)
        elif args.command == "render":
            ids = [s for s in (args.segments or "").split(",") if s] or None
            result = cmd_render(ctx, ids)
        elif args.command == "classify":
            result = cmd_classify(ctx, args.strategy)
        else:
            result = cmd_evaluate(ctx)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except GazePromptError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILED

    update_manifest(ctx, result)
    print(f"{result.name}: {result.status} {result.message}")
    if args.command == "evaluate" and not args.dry_run:
        print((cfg.out_dir / "report" / "report.txt").read_text(encoding="utf-8"), end="")
    return EXIT_CODES[result.status]


if __name__ == "__main__":
    sys.exit(main())
