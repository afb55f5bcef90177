"""Command line: ``hardballs <kind> [--config PATH] [--seed U64] [--out DIR] [--threads K] [--verbose]``.

``hardballs run --config PATH`` runs whatever kind the configuration names.
``HARDBALLS_OUT_DIR`` and ``HARDBALLS_THREADS`` override the output directory
and worker count unless the flags are given. Exit codes: 0 success,
1 invalid configuration or arguments, 2 a runner assertion (or error).
"""
from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys

from .config import KINDS, ConfigError, ExperimentConfig, load_config, parse_config
from .run import VALIDATION_FAILED, run


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hardballs", description="Hard-ball gas experiments.")
    sub = parser.add_subparsers(dest="kind", required=True)
    for kind in ("run",) + KINDS:
        p = sub.add_parser(kind, help="run the kind named in the config" if kind == "run" else f"{kind} experiment")
        p.add_argument("--config", help="INI configuration file")
        p.add_argument("--seed", type=int, default=0, help="unsigned 64-bit master seed")
        p.add_argument("--out", help="output directory")
        p.add_argument("--threads", type=int, help="worker processes for ensembles")
        p.add_argument("--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return VALIDATION_FAILED if exc.code else 0
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config) if args.config else parse_config("")
    except ConfigError as exc:
        for v in exc.violations:
            print(f"config: {v}", file=sys.stderr)
        return VALIDATION_FAILED
    except OSError as exc:
        print(f"config: {exc}", file=sys.stderr)
        return VALIDATION_FAILED
    if args.kind != "run" and args.kind != cfg.experiment.kind:
        cfg = dataclasses.replace(cfg, experiment=dataclasses.replace(cfg.experiment, kind=args.kind))
    if not 0 <= args.seed < 2 ** 64:
        print("--seed must be an unsigned 64-bit integer", file=sys.stderr)
        return VALIDATION_FAILED
    out = args.out or os.environ.get("HARDBALLS_OUT_DIR") or cfg.output.dir
    threads = args.threads
    if threads is None:
        try:
            threads = int(os.environ.get("HARDBALLS_THREADS", "1"))
        except ValueError:
            print("HARDBALLS_THREADS must be an integer", file=sys.stderr)
            return VALIDATION_FAILED
    if threads < 1:
        print("--threads must be >= 1", file=sys.stderr)
        return VALIDATION_FAILED
    report = run(cfg, args.seed, out, threads)
    print(f"{report.kind}: {report.status} -> {report.paths.get('payload')}")
    if report.error:
        print(report.error, file=sys.stderr)
    return report.exit_code


if __name__ == "__main__":
    sys.exit(main())
