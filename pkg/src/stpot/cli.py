"""Command-line entry point: ``stpot <subcommand> --config run.toml``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np
from scipy import linalg

from . import pipeline
from .config import ConfigError, load_config, validate
from .data import DataError
from .dependence import DependenceError, DependenceFitError
from .marginal import MarginalFitError
from .returns import ReturnLevelError
from .simulate import SimulationError
from .spatial import SpatialModelError
from .trend import TrendFitError

EXIT_OK = 0
EXIT_USER = 2
EXIT_NUMERIC = 3

NUMERIC_ERRORS = (MarginalFitError, TrendFitError, DependenceFitError, DependenceError, ReturnLevelError,
                  SimulationError, SpatialModelError, linalg.LinAlgError, FloatingPointError)
USER_ERRORS = (ConfigError, DataError, pipeline.BundleError, FileNotFoundError, ValueError)


def _periods(text: str) -> list[float]:
    try:
        vals = [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid return periods {text!r}") from None
    if not vals or any(v < 1 for v in vals):
        raise argparse.ArgumentTypeError("return periods must be numbers >= 1")
    return [int(v) if v.is_integer() else v for v in vals]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="stpot", description="Space-time peaks-over-threshold extremes.")
    parser.add_argument("-v", "--verbose", action="count", default=0, help="more logging (repeatable)")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, type=Path, help="run configuration (TOML)")
        p.add_argument("--threads", type=int, default=None, help="worker-count hint")
        return p

    p = add("fit", "fit marginal, trend and dependence models")
    p.add_argument("--q-ell", type=float, default=None, help="override marginal.q_ell")
    p.add_argument("--family", default=None, help="override trend.family (log-linear|linear)")
    p.add_argument("--init-tau", type=float, default=None)
    p.add_argument("--init-kappa", type=float, default=None)
    p.add_argument("--u-quantile", type=float, default=None)

    add("diagnose", "QQ pairs, extremogram and variogram curves")

    p = add("simulate", "simulate l-Pareto fields from the fitted dependence model")
    p.add_argument("--out", default="simulated.csv", help="CSV path inside the output directory")

    p = add("returns", "return levels at stations or on the grid")
    p.add_argument("--m", type=_periods, default=None, help="comma-separated return periods in years")
    p.add_argument("--method", choices=("ene", "ewt"), default=None)
    where = p.add_mutually_exclusive_group()
    where.add_argument("--site", action="append", default=None, help="station id (repeatable)")
    where.add_argument("--grid", action="store_true", help="compute the gridded map instead")

    p = add("map", "gridded return-level map")
    p.add_argument("--m", type=_periods, default=None)
    p.add_argument("--method", choices=("ene", "ewt"), default=None)

    add("pipeline", "fit, diagnose, simulate, returns and map with a manifest")
    return parser


def _apply_overrides(cfg, args) -> None:
    if args.threads is not None:
        if args.threads < 1:
            raise ConfigError("--threads must be >= 1")
        cfg.threads = args.threads
    if args.command == "fit":
        if args.q_ell is not None:
            cfg.marginal.q_ell = args.q_ell
        if args.family is not None:
            cfg.trend.family = args.family.replace("-", "_")
        if args.init_tau is not None:
            cfg.dependence.init_tau = args.init_tau
        if args.init_kappa is not None:
            cfg.dependence.init_kappa = args.init_kappa
        if args.u_quantile is not None:
            cfg.dependence.u_quantile = args.u_quantile
        validate(cfg)


def run(args) -> list[Path]:
    cfg = load_config(args.config)
    _apply_overrides(cfg, args)
    cmd = args.command
    if cmd == "fit":
        return pipeline.stage_fit(cfg)
    if cmd == "diagnose":
        return pipeline.stage_diagnose(cfg)
    if cmd == "simulate":
        return pipeline.stage_simulate(cfg, args.out)
    if cmd == "returns":
        if args.grid:
            return pipeline.stage_map(cfg, args.m, args.method)
        return pipeline.stage_returns(cfg, args.m, args.method, args.site)
    if cmd == "map":
        return pipeline.stage_map(cfg, args.m, args.method)
    return [pipeline.stage_pipeline(cfg)]


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        with np.errstate(over="ignore", under="ignore"):
            paths = run(args)
    except NUMERIC_ERRORS as exc:
        _report(exc)
        return EXIT_NUMERIC
    except USER_ERRORS as exc:
        _report(exc)
        return EXIT_USER
    for p in paths:
        print(p)
    return EXIT_OK


def _report(exc: BaseException) -> None:
    stage = getattr(exc, "stage", None)
    where = f" [{stage}]" if stage else ""
    print(f"stpot: error{where}: {exc}", file=sys.stderr)


if __name__ == "__main__":
    sys.exit(main())
