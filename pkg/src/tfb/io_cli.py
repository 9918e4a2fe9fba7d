"""Command-line interface: CSV ingestion, JSON reports, weight dumps.

Subcommands
-----------
estimate
    Cross-fit over repeated sample splits, median-aggregate, and write a
    JSON report (point, variance, interval, per-split table, imbalance
    tables, effective sample sizes), optionally dumping every fold's
    weights to CSV.
weights
    Fit the outcome model on the full sample, solve for balancing
    weights against that fit, and write them to CSV alongside a JSON
    diagnostic summary.
diagnose
    Score externally supplied weights: compute the imbalance diagnostic
    and a per-covariate balance table under the chosen model backend.
simulate
    Run the Monte Carlo harness and write its metrics report.

All JSON documents carry ``schema_version`` and the fully resolved
configuration (defaults included) and are serialized with sorted keys,
so identical invocations produce byte-identical output.  Exit codes:
0 success, 1 usage error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys

import numpy as np

from . import balance_metrics as bm
from .dataset import (
    Dataset,
    Estimand,
    expand_features,
    standardize_covariates,
    validate,
)
from .effect_estimators import (
    EstimatorConfig,
    build_report,
    confidence_interval,
    estimate_with_splits,
    fit_full_sample,
    solve_full_sample,
    variance_hat,
    wdim,
)
from .errors import DataError, NumericalError
from .outcome_models import CvConfig, predict
from .simulation import (
    SUPPORTED_METHODS,
    metrics_to_dict,
    per_replicate_rows,
    run_monte_carlo,
)
from .tfb_solver import SolverConfig

SCHEMA_VERSION = "1"

WEIGHT_COLUMNS = ("unit_index", "weight", "fold", "split")


class _Parser(argparse.ArgumentParser):
    """Argument parser that exits with status 1 on usage errors."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


# --------------------------------------------------------------------------
# CSV ingestion
# --------------------------------------------------------------------------


def read_csv(path: str) -> Dataset:
    """Load a dataset from a comma-delimited UTF-8 file.

    The header must contain ``y`` (real outcome) and ``d`` (0/1
    treatment); every other column is a covariate, kept in header
    order.  Quoting follows RFC 4180 (the csv module's default).
    """
    with open(path, "r", encoding="utf-8", newline="") as handle:
        reader = csv.reader(handle)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        for required in ("y", "d"):
            if required not in header:
                raise DataError(f"{path}: missing required column {required!r}")
        y_col = header.index("y")
        d_col = header.index("d")
        cov_idx = [j for j in range(len(header)) if j not in (y_col, d_col)]
        body = []
        for line_no, row in enumerate(reader, start=2):
            if not row or (len(row) == 1 and row[0].strip() == ""):
                continue
            if len(row) != len(header):
                raise DataError(
                    f"{path}: row {line_no} has {len(row)} fields, "
                    f"expected {len(header)}"
                )
            body.append((line_no, row))
    if len(body) < 2:
        raise DataError(f"{path}: fewer than 2 data rows")

    def cell(text: str, line_no: int, name: str) -> float:
        try:
            return float(text)
        except ValueError:
            raise DataError(
                f"{path}: row {line_no}, column {name!r}: cannot parse {text!r}"
            ) from None

    n = len(body)
    y = np.empty(n)
    d = np.empty(n, dtype=np.int64)
    x = np.empty((n, len(cov_idx)))
    for i, (line_no, row) in enumerate(body):
        y[i] = cell(row[y_col], line_no, "y")
        level = cell(row[d_col], line_no, "d")
        if level not in (0.0, 1.0):
            raise DataError(
                f"{path}: row {line_no}, column 'd': must be 0 or 1, "
                f"got {row[d_col]!r}"
            )
        d[i] = int(level)
        for k, j in enumerate(cov_idx):
            x[i, k] = cell(row[j], line_no, header[j])
    return validate(y, d, x, columns=tuple(header[j] for j in cov_idx))


# --------------------------------------------------------------------------
# Shared plumbing
# --------------------------------------------------------------------------


def _prepare_dataset(ds: Dataset, args) -> Dataset:
    if args.standardize:
        ds, _ = standardize_covariates(ds)
    if args.expand_features:
        ds = expand_features(ds, exclude=tuple(args.exclude))
        if args.standardize:
            ds, _ = standardize_covariates(ds)
    return ds


def _parse_lambda_grid(text):
    if text is None:
        return None
    try:
        grid = tuple(float(part) for part in text.split(","))
    except ValueError:
        raise DataError(f"cannot parse --lambda-grid {text!r}") from None
    return grid


def _estimator_config(args) -> EstimatorConfig:
    cv = CvConfig(
        lambda_grid=_parse_lambda_grid(args.lambda_grid),
        folds=args.cv_folds,
        seed=args.seed,
    )
    solver = SolverConfig(max_iters=args.solver_max_iters, tol=args.solver_tol)
    return EstimatorConfig(
        backend=args.backend,
        estimand=Estimand.parse(args.estimand),
        q=args.q,
        gamma=args.gamma,
        kernel_bandwidth=args.bandwidth,
        cv=cv,
        bootstrap_reps=args.bootstrap_reps,
        solver=solver,
    )


_MODEL_FIELDS = (
    "data",
    "estimand",
    "backend",
    "q",
    "gamma",
    "seed",
    "standardize",
    "expand_features",
    "exclude",
    "bandwidth",
    "cv_folds",
    "bootstrap_reps",
    "solver_max_iters",
    "solver_tol",
    "out",
)


def _resolved_config(args, fields) -> dict:
    out = {"command": args.command}
    for name in fields:
        out[name] = getattr(args, name)
    if "lambda_grid" in fields:
        grid = _parse_lambda_grid(args.lambda_grid)
        out["lambda_grid"] = None if grid is None else list(grid)
    return out


def _emit_json(payload: dict, path) -> None:
    text = json.dumps(payload, indent=2, sort_keys=True, allow_nan=False) + "\n"
    if path is None or path == "-":
        sys.stdout.write(text)
    else:
        with open(path, "w", encoding="utf-8", newline="\n") as handle:
            handle.write(text)


def _write_weight_rows(path, rows) -> None:
    """Weight CSV dump; weights carry 17 significant digits so a
    read-back reproduces them exactly."""
    with open(path, "w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(WEIGHT_COLUMNS)
        for unit_index, weight, fold, split in rows:
            writer.writerow([unit_index, f"{weight:.17g}", fold, split])


def _fold_weight_rows(ds: Dataset, fold, estimand: Estimand, split: int):
    if estimand is Estimand.ATE:
        blocks = zip(fold.weights, fold.weighted_rows)
    else:
        blocks = [(fold.weights, fold.weighted_rows)]
    for weights, rows in blocks:
        for w, internal in zip(weights, rows):
            yield int(ds.order[internal]), float(w), fold.estimate_fold, split


def _predictions(fits, x: np.ndarray, estimand: Estimand):
    if estimand is Estimand.ATE:
        return (predict(fits[0], x), predict(fits[1], x))
    return predict(fits, x)


def _group_rows(ds: Dataset, estimand: Estimand):
    if estimand is Estimand.ATT:
        return [("att", ds.control_rows())]
    if estimand is Estimand.ATC:
        return [("atc", ds.treated_rows())]
    return [("ate_control", ds.control_rows()), ("ate_treated", ds.treated_rows())]


def _tfi_json(report) -> dict:
    return {
        "q": report.q,
        "estimand": report.estimand.value,
        "total": report.total,
        "chi_sq_term": report.chi_sq_term,
        "prediction_term": report.prediction_term,
        "sides": [
            {
                "label": side.label,
                "dof": side.dof,
                "chi_sq_term": side.chi_sq_term,
                "prediction_term": side.prediction_term,
                "imbalance_norm": float(np.linalg.norm(side.imbalance)),
            }
            for side in report.sides
        ],
    }


def _imbalance_json(ds: Dataset, weights, estimand: Estimand) -> list[dict]:
    """Initial vs weighted per-covariate imbalance tables."""
    tables = []
    if estimand is Estimand.ATE:
        sides = [("ate_control", weights[0], 0), ("ate_treated", weights[1], 1)]
        for label, w, side in sides:
            uniform = np.ones(w.shape[0])
            tables.append(
                {
                    "side": label,
                    "columns": list(ds.columns),
                    "initial": list(
                        bm.imbalance(uniform, ds.x, ds.d, estimand, side=side)
                    ),
                    "weighted": list(bm.imbalance(w, ds.x, ds.d, estimand, side=side)),
                }
            )
        return tables
    label = "att" if estimand is Estimand.ATT else "atc"
    size = ds.n_control if estimand is Estimand.ATT else ds.n_treated
    tables.append(
        {
            "side": label,
            "columns": list(ds.columns),
            "initial": list(bm.imbalance(np.ones(size), ds.x, ds.d, estimand)),
            "weighted": list(bm.imbalance(weights, ds.x, ds.d, estimand)),
        }
    )
    return tables


# --------------------------------------------------------------------------
# Subcommands
# --------------------------------------------------------------------------


def _cmd_estimate(args) -> int:
    ds = _prepare_dataset(read_csv(args.data), args)
    config = _estimator_config(args)
    estimate = estimate_with_splits(
        ds, config, n_splits=args.splits, base_seed=args.seed
    )
    report = build_report(ds, config, estimate)
    payload = {
        "schema_version": SCHEMA_VERSION,
        "config": _resolved_config(
            args, _MODEL_FIELDS + ("lambda_grid", "splits", "weights_out")
        ),
        "report": {
            "estimand": report.estimand.value,
            "backend": report.backend,
            "q": report.q,
            "gamma": report.gamma,
            "n": report.n,
            "n_control": report.n_control,
            "n_treated": report.n_treated,
            "n_splits": report.n_splits,
            "base_seed": report.base_seed,
            "point": report.point,
            "variance": report.variance,
            "ci_low": report.ci[0],
            "ci_high": report.ci[1],
            "augmented_point": report.augmented_point,
            "augmented_variance": report.augmented_variance,
            "augmented_ci_low": report.augmented_ci[0],
            "augmented_ci_high": report.augmented_ci[1],
            "ress": report.ress,
            "imbalance": [
                {
                    "side": table.side,
                    "columns": list(table.columns),
                    "initial": list(table.initial),
                    "weighted": list(table.weighted),
                }
                for table in report.imbalance_tables
            ],
            "splits": [
                {
                    "split": s,
                    "seed": split.seed,
                    "point": split.point,
                    "augmented_point": split.augmented_point,
                    "variance": split.variance,
                    "folds": [
                        {
                            "fit_fold": fold.fit_fold,
                            "estimate_fold": fold.estimate_fold,
                            "point": fold.point,
                            "augmented_point": fold.augmented_point,
                            "variance": fold.variance,
                            "tfi_total": fold.tfi_total,
                            "tfi_chi_sq_term": fold.tfi_chi_sq_term,
                            "tfi_prediction_term": fold.tfi_prediction_term,
                            "objective": fold.objective,
                            "converged": fold.converged,
                            "iterations": fold.iterations,
                        }
                        for fold in split.folds
                    ],
                }
                for s, split in enumerate(estimate.splits)
            ],
        },
    }
    _emit_json(payload, args.out)
    if args.weights_out:
        rows = []
        for s, split in enumerate(estimate.splits):
            for fold in split.folds:
                rows.extend(_fold_weight_rows(ds, fold, config.estimand, s))
        _write_weight_rows(args.weights_out, rows)
    return 0


def _cmd_weights(args) -> int:
    ds = _prepare_dataset(read_csv(args.data), args)
    config = _estimator_config(args)
    fits, design, solution = solve_full_sample(ds, config, seed=args.seed)
    w = solution.weights
    point = wdim(ds.y, ds.d, w, config.estimand)
    augmented = point - bm.ewc_bias_estimate(w, design, ds.d, fits, config.estimand)
    preds = _predictions(fits, ds.x, config.estimand)
    variance = variance_hat(ds.y, ds.d, w, preds, point, config.estimand)
    ci = confidence_interval(point, variance, config.gamma)

    rows = []
    groups = _group_rows(ds, config.estimand)
    weight_sets = w if config.estimand is Estimand.ATE else (w,)
    for (label, internal_rows), weights in zip(groups, weight_sets):
        for weight, internal in zip(weights, internal_rows):
            # -1 marks a full-sample solve (no fold, no split)
            rows.append((int(ds.order[internal]), float(weight), -1, -1))
    _write_weight_rows(args.weights_out, rows)

    payload = {
        "schema_version": SCHEMA_VERSION,
        "config": _resolved_config(
            args, _MODEL_FIELDS + ("lambda_grid", "weights_out")
        ),
        "report": {
            "estimand": config.estimand.value,
            "backend": config.backend,
            "n": ds.n,
            "n_control": ds.n_control,
            "n_treated": ds.n_treated,
            "point": point,
            "augmented_point": augmented,
            "variance": variance,
            "ci_low": ci[0],
            "ci_high": ci[1],
            "objective": solution.objective,
            "converged": solution.converged,
            "iterations": solution.iterations,
            "ress": {
                label: bm.ress(weights)
                for (label, _), weights in zip(groups, weight_sets)
            },
            "tfi": _tfi_json(solution.tfi_report),
            "imbalance": _imbalance_json(ds, w, config.estimand),
        },
    }
    _emit_json(payload, args.out)
    return 0


def _read_weight_csv(path: str, n: int):
    """Read (unit_index, weight) pairs; fold/split columns are ignored."""
    pairs = []
    with open(path, "r", encoding="utf-8", newline="") as handle:
        reader = csv.DictReader(handle)
        if reader.fieldnames is None:
            raise DataError(f"{path}: empty weights file")
        for required in ("unit_index", "weight"):
            if required not in reader.fieldnames:
                raise DataError(f"{path}: missing required column {required!r}")
        for line_no, row in enumerate(reader, start=2):
            try:
                unit = int(row["unit_index"])
            except (TypeError, ValueError):
                raise DataError(
                    f"{path}: row {line_no}: bad unit_index "
                    f"{row.get('unit_index')!r}"
                ) from None
            try:
                weight = float(row["weight"])
            except (TypeError, ValueError):
                raise DataError(
                    f"{path}: row {line_no}: bad weight {row.get('weight')!r}"
                ) from None
            if not 0 <= unit < n:
                raise DataError(
                    f"{path}: row {line_no}: unit_index {unit} outside 0..{n - 1}"
                )
            pairs.append((unit, weight))
    if not pairs:
        raise DataError(f"{path}: no weight rows")
    return pairs


def _align_weights(ds: Dataset, pairs, estimand: Estimand):
    """Map input-order (unit_index, weight) pairs onto the weighted
    group(s), requiring exactly one weight per weighted unit."""
    inverse = np.empty(ds.n, dtype=np.int64)
    inverse[ds.order] = np.arange(ds.n)
    full = np.full(ds.n, np.nan)
    for unit, weight in pairs:
        internal = inverse[unit]
        if not np.isnan(full[internal]):
            raise DataError(f"duplicate weight for unit_index {unit}")
        full[internal] = weight

    def block(label: str, rows: np.ndarray) -> np.ndarray:
        values = full[rows]
        if np.isnan(values).any():
            missing = int(ds.order[rows[np.isnan(values)][0]])
            raise DataError(
                f"weights do not cover the {label} group: missing "
                f"unit_index {missing}"
            )
        return values

    groups = _group_rows(ds, estimand)
    covered = np.concatenate([rows for _, rows in groups])
    extras = np.flatnonzero(~np.isnan(full))
    stray = np.setdiff1d(extras, covered)
    if stray.size:
        raise DataError(
            f"weight given for unit_index {int(ds.order[stray[0]])}, which is "
            f"not in the weighted group for estimand {estimand.value}"
        )
    blocks = [block(label, rows) for label, rows in groups]
    if estimand is Estimand.ATE:
        return (blocks[0], blocks[1])
    return blocks[0]


def _cmd_diagnose(args) -> int:
    ds = _prepare_dataset(read_csv(args.data), args)
    config = _estimator_config(args)
    pairs = _read_weight_csv(args.weights, ds.n)
    weights = _align_weights(ds, pairs, config.estimand)
    fits, design = fit_full_sample(ds, config, seed=args.seed)
    report = bm.tfi(weights, design, ds.d, fits, config.q, config.estimand)
    weight_sets = weights if config.estimand is Estimand.ATE else (weights,)
    payload = {
        "schema_version": SCHEMA_VERSION,
        "config": _resolved_config(
            args, _MODEL_FIELDS + ("lambda_grid", "weights")
        ),
        "report": {
            "estimand": config.estimand.value,
            "backend": config.backend,
            "n": ds.n,
            "n_control": ds.n_control,
            "n_treated": ds.n_treated,
            "ress": {
                label: bm.ress(w)
                for (label, _), w in zip(_group_rows(ds, config.estimand), weight_sets)
            },
            "tfi": _tfi_json(report),
            "imbalance": _imbalance_json(ds, weights, config.estimand),
        },
    }
    _emit_json(payload, args.out)
    return 0


def _cmd_simulate(args) -> int:
    if args.methods.strip() == "all":
        methods = SUPPORTED_METHODS
    else:
        methods = tuple(part.strip() for part in args.methods.split(",") if part.strip())
    report = run_monte_carlo(
        args.dgp,
        args.n,
        args.reps,
        methods=methods,
        base_seed=args.seed,
        q=args.q,
        gamma=args.gamma,
        delta=args.delta,
        workers=args.workers,
    )
    payload = {
        "schema_version": SCHEMA_VERSION,
        "config": {
            "command": "simulate",
            "dgp": args.dgp,
            "n": args.n,
            "reps": args.reps,
            "methods": list(methods),
            "seed": args.seed,
            "q": args.q,
            "gamma": args.gamma,
            "delta": args.delta,
            "workers": args.workers,
            "out": args.out,
            "replicate_csv": args.replicate_csv,
        },
        "metrics": metrics_to_dict(report),
    }
    _emit_json(payload, args.out)
    if args.replicate_csv:
        rows = per_replicate_rows(report)
        fields = ["replicate", "seed", "method", "failed", "error", "estimate"]
        fields += ["augmented", "variance", "ci_low", "ci_high", "covered", "ress"]
        fields += ["fold_point_1", "fold_point_2"]
        fields += [f"leftover_{name}" for name in report.latent_names]
        with open(args.replicate_csv, "w", encoding="utf-8", newline="") as handle:
            writer = csv.DictWriter(handle, fieldnames=fields, lineterminator="\n")
            writer.writeheader()
            writer.writerows(rows)
    return 0


# --------------------------------------------------------------------------
# Parser
# --------------------------------------------------------------------------


def _add_model_args(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--data", required=True, help="input CSV (columns y, d, covariates)")
    parser.add_argument("--estimand", default="att", choices=["att", "atc", "ate"])
    parser.add_argument("--backend", default="ols", choices=["ols", "krls", "lasso"])
    parser.add_argument("--q", type=float, default=0.95, help="imbalance quantile level")
    parser.add_argument("--gamma", type=float, default=0.95, help="confidence level")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument(
        "--standardize", action="store_true", help="scale covariates to mean 0, sd 1"
    )
    parser.add_argument(
        "--expand-features",
        action="store_true",
        help="append squares and pairwise interactions",
    )
    parser.add_argument(
        "--exclude",
        action="append",
        default=[],
        metavar="COLUMN",
        help="generated column to drop (repeatable; with --expand-features)",
    )
    parser.add_argument(
        "--bandwidth", type=float, default=None, help="kernel bandwidth (krls only)"
    )
    parser.add_argument("--cv-folds", type=int, default=5)
    parser.add_argument(
        "--lambda-grid",
        default=None,
        help="comma-separated penalty grid for krls/lasso cross-validation",
    )
    parser.add_argument("--bootstrap-reps", type=int, default=200)
    parser.add_argument("--solver-max-iters", type=int, default=50000)
    parser.add_argument("--solver-tol", type=float, default=1e-10)
    parser.add_argument("--out", default=None, help="report JSON path (default stdout)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="tfb",
        description="Balancing weights targeted at a fitted outcome regression.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    est = sub.add_parser("estimate", help="cross-fit estimate over repeated splits")
    _add_model_args(est)
    est.add_argument("--splits", type=int, default=100, help="number of sample splits")
    est.add_argument("--weights-out", default=None, help="optional weights CSV path")
    est.set_defaults(func=_cmd_estimate)

    wts = sub.add_parser("weights", help="full-sample balancing weights")
    _add_model_args(wts)
    wts.add_argument("--weights-out", required=True, help="weights CSV path")
    wts.set_defaults(func=_cmd_weights)

    diag = sub.add_parser("diagnose", help="score externally supplied weights")
    _add_model_args(diag)
    diag.add_argument("--weights", required=True, help="weights CSV (unit_index, weight)")
    diag.set_defaults(func=_cmd_diagnose)

    sim = sub.add_parser("simulate", help="Monte Carlo benchmark harness")
    sim.add_argument("--dgp", required=True, choices=["1", "2"])
    sim.add_argument("--n", type=int, default=1000)
    sim.add_argument("--reps", type=int, default=10)
    sim.add_argument(
        "--methods",
        default="all",
        help="comma-separated subset of: " + ", ".join(SUPPORTED_METHODS),
    )
    sim.add_argument("--seed", type=int, default=0)
    sim.add_argument("--q", type=float, default=0.95)
    sim.add_argument("--gamma", type=float, default=0.95)
    sim.add_argument(
        "--delta",
        type=float,
        default=None,
        help="imbalance tolerance for abal1 (default: 0.1 x column sd)",
    )
    sim.add_argument(
        "--workers", type=int, default=None, help="process count (default TFB_THREADS or 1)"
    )
    sim.add_argument("--out", default=None, help="metrics JSON path (default stdout)")
    sim.add_argument("--replicate-csv", default=None, help="per-replicate CSV path")
    sim.set_defaults(func=_cmd_simulate)
    return parser


def _emit_error(kind: str, exc: Exception) -> None:
    payload = {
        "schema_version": SCHEMA_VERSION,
        "error": {"type": kind, "message": str(exc)},
    }
    print(json.dumps(payload, indent=2, sort_keys=True), file=sys.stderr)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return int(args.func(args))
    except DataError as exc:
        _emit_error("data", exc)
        return 2
    except NumericalError as exc:
        _emit_error("numerical", exc)
        return 3
    except OSError as exc:
        _emit_error("io", exc)
        return 2


if __name__ == "__main__":
    sys.exit(main())
