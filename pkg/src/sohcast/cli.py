"""Command-line interface: one subcommand per pipeline stage.

Every subcommand takes `--config <yaml>`; stages communicate through the
bundle and output directories named in the config.  Exit codes: 0 on
success, 2 for configuration or argument errors, 3 for missing or
inconsistent data, 4 for numeric failures during training or simulation.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import pipeline
from .config import load_config
from .errors import DataError, NumericError, ParameterError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sohcast",
        description=(
            "Transfer-learning pipeline for battery state-of-health "
            "forecasting with conformal intervals."
        ),
    )
    parser.add_argument(
        "--log-level",
        default="INFO",
        choices=["DEBUG", "INFO", "WARNING", "ERROR"],
        help="logging verbosity (default INFO)",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name: str, help_: str, variant: bool = False) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help_)
        p.add_argument(
            "--config", type=Path, required=True, help="path to run config YAML"
        )
        if variant:
            p.add_argument(
                "--variant",
                default=None,
                choices=list(pipeline.VARIANTS),
                help="model variant to operate on",
            )
        return p

    add("generate", "simulate the fleet and write the data bundle")
    add("train", "train a model variant", variant=True)
    add("tune", "LOBO-tune the MMD weight on source batches only")
    add("calibrate", "compute conformal scores and eps_hat", variant=True)
    add("forecast", "write per-cell target forecasts with bands", variant=True)
    add("evaluate", "rollout metrics for all variants plus coverage")
    add("export-plot", "emit consolidated plot-ready CSVs")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=getattr(logging, args.log_level),
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        cfg = load_config(args.config)
        if args.command == "generate":
            result = pipeline.cmd_generate(cfg)
        elif args.command == "train":
            result = pipeline.cmd_train(cfg, args.variant or "baseline")
        elif args.command == "tune":
            result = pipeline.cmd_tune(cfg)
        elif args.command == "calibrate":
            result = pipeline.cmd_calibrate(cfg, args.variant or "adapted")
        elif args.command == "forecast":
            result = pipeline.cmd_forecast(cfg, args.variant or "adapted")
        elif args.command == "evaluate":
            result = pipeline.cmd_evaluate(cfg)
        elif args.command == "export-plot":
            result = pipeline.cmd_export_plot(cfg)
        else:  # pragma: no cover - argparse enforces choices
            raise ParameterError(f"unknown command {args.command!r}")
    except ParameterError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    for key, value in result.items():
        print(f"{key}: {value}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
