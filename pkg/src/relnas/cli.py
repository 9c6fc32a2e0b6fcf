"""Command-line entry points for the search-and-distill pipeline."""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

from .pipeline import (
    STAGES,
    PipelineConfig,
    PipelineContext,
    config_hash,
    load_config,
    run_pipeline,
    run_stage,
    save_config,
)

_STAGE_COMMANDS = list(STAGES)


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="relnas",
        description="Budgeted one-shot architecture search with distillation "
                    "for twin-tower text relevance.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_init = sub.add_parser("init-config", help="write a default config file")
    p_init.add_argument("path", type=Path)

    for name in _STAGE_COMMANDS + ["pipeline"]:
        help_text = "run all stages" if name == "pipeline" else f"run the {name} stage"
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", type=Path, required=True, help="pipeline config JSON")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--work-dir", type=Path, default=Path("relnas-work"),
                       help="artifact and report directory")
        p.add_argument("--force", action="store_true",
                       help="re-run even if this stage's artifacts exist")
    return parser


def _load(args) -> PipelineConfig:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    return cfg


def main(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        if args.command == "init-config":
            save_config(PipelineConfig(), args.path)
            print(f"wrote default config to {args.path}")
            return 0
        cfg = _load(args)
        if args.command == "pipeline":
            report = run_pipeline(cfg, args.work_dir,
                                  progress=lambda stage, meta: print(
                                      f"[{config_hash(cfg)[:12]}] {stage}: done "
                                      f"({meta.get('_elapsed_seconds', 0)}s)"))
            print(json.dumps(report, indent=2, sort_keys=True))
            return 0
        ctx = PipelineContext(cfg, args.work_dir)
        meta = run_stage(ctx, args.command, force=args.force)
        print(json.dumps(meta, indent=2, sort_keys=True))
        return 0
    except Exception as exc:  # CLI boundary: report and signal failure
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
