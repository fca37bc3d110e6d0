"""Command-line interface: simulate, fit, experiment, loan-eval, pdp.

Exit codes: 0 on success, 2 for configuration problems (bad flags, bad
config JSON, unknown feature names), 3 for data problems (missing or
malformed input files).
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import os
import sys

import numpy as np

from .errors import ConfigError, DataError
from .experiment import (
    DEFAULT_PRINT_CONFIG,
    ExperimentConfig,
    fit_print_policy,
    run_experiment,
    summarize_rows,
)
from .loans import (
    LoanTable,
    _standardized_features,
    evaluate_on_demand,
    fit_demand,
    partial_dependence,
    read_loan_csv,
)
from .minimax import MinimaxConfig
from .policy import load_policy
from .simulator import SimParams, generate_dataset, read_csv, write_csv

__all__ = ["main", "build_parser"]


# ---------------------------------------------------------------------------
# Input helpers
# ---------------------------------------------------------------------------

def _load_json(value: str, what: str) -> dict:
    """Read a JSON object from a file path or, failing that, a literal."""
    if os.path.exists(value):
        try:
            with open(value) as fh:
                obj = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"{what} {value!r}: {exc}") from exc
    else:
        try:
            obj = json.loads(value)
        except json.JSONDecodeError as exc:
            raise ConfigError(
                f"{what} {value!r} is neither an existing file nor valid JSON"
            ) from exc
    if not isinstance(obj, dict):
        raise ConfigError(f"{what} must be a JSON object, got {type(obj).__name__}")
    return obj


def _read_dataset(path: str):
    try:
        return read_csv(path)
    except OSError as exc:
        raise DataError(f"{path}: {exc}") from exc


def _read_loans(path: str) -> LoanTable:
    try:
        return read_loan_csv(path)
    except OSError as exc:
        raise DataError(f"{path}: {exc}") from exc


def _parse_penalties(text: str) -> list[float]:
    try:
        values = [float(tok) for tok in text.split(",") if tok.strip()]
    except ValueError as exc:
        raise ConfigError(f"bad penalty list {text!r}: {exc}") from exc
    if not values:
        raise ConfigError("penalty list is empty")
    return values


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def _cmd_simulate(args: argparse.Namespace) -> int:
    if args.params is not None:
        params = SimParams.from_dict(_load_json(args.params, "params"))
    else:
        params = SimParams()
    dataset = generate_dataset(params, args.n, args.seed,
                               keep_hidden=args.diagnostics)
    write_csv(dataset, args.out, diagnostics=args.diagnostics)
    print(f"wrote {dataset.n} samples to {args.out}")
    return 0


def _cmd_fit(args: argparse.Namespace) -> int:
    dataset = _read_dataset(args.data)
    if args.config is not None:
        config = MinimaxConfig.from_dict(_load_json(args.config, "config"))
    else:
        config = DEFAULT_PRINT_CONFIG
    if not args.p1 < args.p2:
        raise ConfigError(f"need p1 < p2, got [{args.p1}, {args.p2}]")
    result = fit_print_policy(dataset, config, p1=args.p1, p2=args.p2)
    result.policy.to_json(args.out)
    print(f"fit {dataset.n} samples (temper {result.temper:.3f}); "
          f"wrote policy to {args.out}")
    return 0


def _cmd_experiment(args: argparse.Namespace) -> int:
    config = ExperimentConfig.from_dict(_load_json(args.config, "config"))
    if args.out_dir is not None:
        config = dataclasses.replace(config, output_dir=args.out_dir)
    if config.output_dir is None:
        raise ConfigError(
            "no output directory: set output_dir in the config or pass --out-dir"
        )
    rows = run_experiment(config, workers=args.workers)
    n_ok = sum(1 for row in rows if row["status"] == "ok")
    summary = summarize_rows(rows)
    print(f"{len(rows)} rows ({n_ok} ok) in {config.output_dir}; "
          f"{len(summary)} (scenario, n, method) groups summarized")
    return 0


def _cmd_loan_eval(args: argparse.Namespace) -> int:
    table = _read_loans(args.records)
    penalties = _parse_penalties(args.demand_penalties)
    model = fit_demand(table, penalties, folds=args.folds, seed=args.seed)
    out_rows = []
    for path in args.policies:
        policy = load_policy(path)
        ev = evaluate_on_demand(model, policy, table,
                                grid_points=args.grid_points)
        out_rows.append((os.path.basename(path), ev.policy_revenue,
                         ev.optimal_revenue, ev.historical_revenue))
    try:
        with open(args.out, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["policy", "policy_revenue", "optimal_revenue",
                             "historical_revenue"])
            for name, pol, opt, hist in out_rows:
                writer.writerow([name, repr(pol), repr(opt), repr(hist)])
    except OSError as exc:
        raise DataError(f"{args.out}: {exc}") from exc
    print(f"evaluated {len(out_rows)} policies on {table.n} records; "
          f"wrote {args.out}")
    return 0


def _cmd_pdp(args: argparse.Namespace) -> int:
    policy = load_policy(args.policy)
    table = _read_loans(args.records)
    if args.feature not in table.feature_names:
        raise ConfigError(
            f"unknown feature {args.feature!r}; available: "
            f"{', '.join(table.feature_names)}"
        )
    index = table.feature_names.index(args.feature)
    x_std, _, _ = _standardized_features(table)
    column = x_std[:, index]
    grid = np.linspace(float(column.min()), float(column.max()),
                       args.grid_points)
    curve = partial_dependence(policy, table, index, grid)
    try:
        with open(args.out, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["value", "mean_price"])
            for v, price in zip(grid, curve):
                writer.writerow([repr(float(v)), repr(float(price))])
    except OSError as exc:
        raise DataError(f"{args.out}: {exc}") from exc
    print(f"wrote {len(grid)}-point curve for {args.feature!r} to {args.out}")
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ivprice",
        description="Personalized pricing from confounded offline data.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate a synthetic pricing dataset")
    p.add_argument("--params", help="JSON file (or literal) of model parameters")
    p.add_argument("--n", type=int, required=True, help="number of samples")
    p.add_argument("--seed", type=int, required=True, help="generator seed")
    p.add_argument("--out", required=True, help="output CSV path")
    p.add_argument("--diagnostics", action="store_true",
                   help="include latent columns (u1, u2, eps_y, eps_p)")
    p.set_defaults(func=_cmd_simulate)

    p = sub.add_parser("fit", help="fit a pricing policy from logged data")
    p.add_argument("--data", required=True, help="input CSV (y,x1,x2,g,p)")
    p.add_argument("--config", help="JSON file (or literal) of fit settings")
    p.add_argument("--out", required=True, help="output policy JSON path")
    p.add_argument("--p1", type=float, default=0.0, help="price lower bound")
    p.add_argument("--p2", type=float, default=10.0, help="price upper bound")
    p.set_defaults(func=_cmd_fit)

    p = sub.add_parser("experiment", help="run a Monte Carlo regret sweep")
    p.add_argument("--config", required=True,
                   help="JSON file (or literal) of sweep settings")
    p.add_argument("--out-dir", help="output directory (overrides config)")
    p.add_argument("--workers", type=int, default=1,
                   help="parallel replicate workers (default 1)")
    p.set_defaults(func=_cmd_experiment)

    p = sub.add_parser("loan-eval",
                       help="score pricing policies under a fitted demand model")
    p.add_argument("--records", required=True, help="loan records CSV")
    p.add_argument("--demand-penalties", required=True,
                   help="comma-separated ridge penalties for the demand fit")
    p.add_argument("--policies", nargs="+", required=True,
                   help="policy JSON files to evaluate")
    p.add_argument("--out", required=True, help="output CSV path")
    p.add_argument("--folds", type=int, default=5,
                   help="cross-validation folds (default 5)")
    p.add_argument("--seed", type=int, default=0,
                   help="fold-assignment seed (default 0)")
    p.add_argument("--grid-points", type=int, default=401,
                   help="price grid size for the optimal benchmark")
    p.set_defaults(func=_cmd_loan_eval)

    p = sub.add_parser("pdp",
                       help="average policy price as one feature sweeps a grid")
    p.add_argument("--policy", required=True, help="policy JSON file")
    p.add_argument("--records", required=True, help="loan records CSV")
    p.add_argument("--feature", required=True, help="feature column name")
    p.add_argument("--out", required=True, help="output CSV path")
    p.add_argument("--grid-points", type=int, default=25,
                   help="grid size over the observed feature range")
    p.set_defaults(func=_cmd_pdp)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except OSError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
