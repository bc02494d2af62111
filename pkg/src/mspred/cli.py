"""Command-line entry point: run experiments, print theory tables, list kinds.

Exit codes: 0 success, 2 config error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import sys

import numpy as np

from .experiments import (
    EXPERIMENT_KINDS,
    ConfigError,
    load_config,
    run,
    theory_report,
)
from .lti import SolverError
from .predictors import DivergenceError, SingularRegressorError
from .theory import OptimizationError

_NUMERICAL_ERRORS = (
    SolverError,
    DivergenceError,
    SingularRegressorError,
    OptimizationError,
    np.linalg.LinAlgError,
)


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mspred",
        description="Monte Carlo experiments comparing single-step, multi-step, "
        "and intermediate predictors of linear dynamical systems.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="run an experiment config and write its CSV")
    run_p.add_argument("--config", required=True, help="path to a key = value config file")
    run_p.add_argument("--out", default=None, help="output CSV path (overrides the config)")
    run_p.add_argument("--workers", type=int, default=1, help="parallel worker processes")
    run_p.add_argument("--seed", type=int, default=None, help="master seed override")

    theory_p = sub.add_parser("theory", help="print the rate/bias table for a config's system")
    theory_p.add_argument("--config", required=True)
    theory_p.add_argument("--out", default=None, help="also write the table as CSV")
    theory_p.add_argument("--seed", type=int, default=None,
                          help="override the Monte Carlo seeds of the estimated components")

    sub.add_parser("list-experiments", help="list experiment kinds")
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        if args.command == "list-experiments":
            for kind, description in EXPERIMENT_KINDS.items():
                print(f"{kind}: {description}")
            return 0
        config = load_config(args.config)
        if args.command == "run":
            if args.seed is not None:
                config = dataclasses.replace(config, master_seed=args.seed)
            if args.workers < 1:
                raise ConfigError("--workers must be >= 1")
            run(config, workers=args.workers, out=args.out)
            return 0
        if args.command == "theory":
            if args.seed is not None:
                config = dataclasses.replace(config, rate_seed=args.seed, bias_seed=args.seed)
            theory_report(config, out=args.out)
            return 0
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except _NUMERICAL_ERRORS as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
