"""Command-line entry point: ``fedskip run|compare|validate-config``.

Exit codes: 0 success, 1 configuration or validation error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from . import experiment
from .errors import ConfigError

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME = 0, 1, 2


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedskip", description="Federated learning with "
                                     "forecast-driven communication skipping.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in [("run", "run the strategy named in the config"),
                            ("compare", "run FedAvg and FedSkipTwin on identical data"),
                            ("validate-config", "check a config file and exit")]:
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, help="path to a JSON config file")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--out", default=None, help="output directory (overrides output_dir)")
        p.add_argument("--threads", type=int, default=None,
                       help="worker threads for client updates")
        p.add_argument("-v", "--verbose", action="store_true", help="log per-round progress")
    return parser


def _load(args) -> experiment.ExperimentConfig:
    cfg = experiment.parse_config(args.config)
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.threads is not None:
        changes["threads"] = args.threads
    if args.out is not None:
        changes["output_dir"] = args.out
    if changes:
        cfg = cfg.with_(**changes)
        experiment.validate(cfg)
    return cfg


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits with 2 on usage errors; those are validation errors here
        return EXIT_OK if exc.code == 0 else EXIT_VALIDATION
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(message)s", stream=sys.stderr)
    try:
        cfg = _load(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    if args.command == "validate-config":
        print(f"ok: {args.config} (config_hash {cfg.config_hash()})")
        return EXIT_OK
    try:
        if args.command == "run":
            summary = experiment.run(cfg)
            print(json.dumps({k: summary[k] for k in
                              ("strategy", "final_accuracy", "total_mb", "mean_skip_rate")}))
        else:
            report = experiment.compare(cfg)
            print(experiment.format_report(report), end="")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except Exception as exc:  # noqa: BLE001 - every runtime failure maps to exit 2
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
