"""Command-line entry point: ``strlab run|check|oracle``."""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys

from .experiment import ENV_LOG_LEVEL, StageError, check_config, load_config, run_experiment, run_oracle


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="strlab", description="Tabular supported trust-region experiments.")
    parser.add_argument("--log-level", default=None, help="logging level (default: $%s or INFO)" % ENV_LOG_LEVEL)
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run an experiment and write trace, summary, reports and figures")
    run.add_argument("--config", required=True)
    run.add_argument("--seed", type=int, default=None, help="override the config seed")
    run.add_argument("--out", default=None, help="output directory (overrides config and environment)")
    run.add_argument("--no-plots", action="store_true")

    check = sub.add_parser("check", help="validate a config without running it")
    check.add_argument("--config", required=True)

    oracle = sub.add_parser("oracle", help="compute the support-constrained optimum for the configured data")
    oracle.add_argument("--config", required=True)
    oracle.add_argument("--seed", type=int, default=None)
    oracle.add_argument("--out", default=None)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = args.log_level or os.environ.get(ENV_LOG_LEVEL, "INFO")
    logging.basicConfig(level=level.upper(), format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        if getattr(args, "seed", None) is not None:
            cfg = dataclasses.replace(cfg, seed=args.seed)
        if args.command == "check":
            check_config(cfg)
            print("config ok")
            return 0
        if args.command == "oracle":
            print(json.dumps(run_oracle(cfg, args.out), indent=2, sort_keys=True))
            return 0
        if args.no_plots:
            cfg = dataclasses.replace(cfg, plots=False)
        return run_experiment(cfg, args.out)
    except (StageError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
