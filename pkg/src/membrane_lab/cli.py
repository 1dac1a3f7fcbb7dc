"""Command-line entry point: ``python -m membrane_lab <command> [options]``."""

from __future__ import annotations

import argparse
import logging
import sys

from .cache import resolve_cache_dir
from .config import EXPERIMENTS, ConfigError, ExperimentConfig
from .experiments import run, write_result


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="membrane-lab", description="Seeded experiments on the membrane model.")
    p.add_argument("command", choices=EXPERIMENTS)
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--seed", type=int, help="unsigned 64-bit seed (overrides the config)")
    p.add_argument("--out", help="output directory (overrides the config)")
    p.add_argument("--cache", help="cache directory; MEMBRANE_CACHE_DIR takes precedence")
    p.add_argument("--threads", type=int, help="worker threads for replica chunks")
    p.add_argument("--format", choices=("csv", "json"), default="csv")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
        changes = {"experiment": args.command}
        if args.seed is not None:
            changes["seed"] = args.seed
        if args.out is not None:
            changes["out"] = args.out
        if args.threads is not None:
            changes["threads"] = args.threads
        cfg = cfg.replace(**changes)
    except (ConfigError, OSError) as exc:
        print(f"membrane-lab: {exc}", file=sys.stderr)
        return 2
    cache_dir = resolve_cache_dir(args.cache, cfg.cache_dir)
    result = run(cfg, cache_dir)
    for path in write_result(result, cfg.out, args.format):
        print(path)
    return 0
