"""Command line entry point: one subcommand per pipeline stage, plus ``run``."""

from __future__ import annotations

import argparse
import logging
import sys

from .checkpoint import CheckpointError
from .config import ConfigError, ExperimentConfig, load_config, save_config
from .pipeline import STAGES, Pipeline, StageError


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rlkv", description="Reasoning-head discovery and head-level KV compression.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    init = sub.add_parser("init-config", help="write the default config as JSON")
    init.add_argument("path")

    for name in STAGES + ("run",):
        sp = sub.add_parser(name, help="run every stage" if name == "run" else f"run the {name} stage")
        sp.add_argument("--config", required=True, help="JSON experiment config")
        sp.add_argument("--out", default=None, help="output directory (default: config output_dir)")
        sp.add_argument("--force", action="store_true", help="rerun even when outputs exist")
    return p


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    if args.command == "init-config":
        save_config(args.path, ExperimentConfig())
        return 0
    try:
        cfg = load_config(args.config)
    except (ConfigError, OSError) as exc:
        print(f"rlkv: config error: {exc}", file=sys.stderr)
        return 2
    pipe = Pipeline(cfg, args.out, force=args.force)
    try:
        if args.command == "run":
            pipe.run()
        else:
            pipe.run_stage(args.command)
    except StageError as exc:
        kind = "checkpoint error" if isinstance(exc.cause, CheckpointError) else "error"
        print(f"rlkv: [{exc.stage}] {kind}: {exc.cause}", file=sys.stderr)
        return exc.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
