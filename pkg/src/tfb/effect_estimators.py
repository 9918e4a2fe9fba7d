"""Treatment-effect estimators built on balancing weights.

The weighted difference in means compares the treated-group mean against
a weighted control mean (for the ATT; the other estimands mirror this).
Its honest-inference workflow splits the sample: one fold fits the
outcome model, the other fold solves for weights and forms the estimate,
roles switch, and the two fold estimates are averaged.  Repeating over
many random splits and taking medians stabilizes the final report.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import balance_metrics as bm
from .dataset import Dataset, Estimand, split_sample
from .errors import DataError
from .kernels import KernelSpec, default_bandwidth, gram_square
from .outcome_models import (
    CvConfig,
    OutcomeModelFit,
    fit_krls,
    fit_lasso_bootstrap,
    fit_ols_sandwich,
    predict,
)
from .tfb_solver import SolverConfig, build_problem, solve

__all__ = [
    "EstimatorConfig",
    "FoldEstimate",
    "SplitResult",
    "SplitEstimate",
    "EstimateReport",
    "wdim",
    "augmented",
    "variance_hat",
    "confidence_interval",
    "median_aggregate",
    "fit_outcome_models",
    "cross_fit_estimate",
    "estimate_with_splits",
    "build_report",
]


# --------------------------------------------------------------------------
# Point estimators, variance, confidence intervals
# --------------------------------------------------------------------------


def _groups(y: np.ndarray, treatment: np.ndarray):
    y = np.asarray(y, dtype=float)
    d = np.asarray(treatment)
    yc = y[d == 0]
    yt = y[d == 1]
    if yc.size == 0 or yt.size == 0:
        raise DataError("need at least one control and one treated unit")
    return yc, yt


def _weights_for(group: np.ndarray, weights, label: str) -> np.ndarray:
    w = np.asarray(weights, dtype=float)
    if w.shape != (group.shape[0],):
        raise DataError(
            f"{label} weights have shape {w.shape}, expected ({group.shape[0]},)"
        )
    return w


def wdim(y: np.ndarray, treatment: np.ndarray, weights, estimand: Estimand) -> float:
    """Weighted difference in means for the given estimand.

    ATT: ``mean(y_treated) - n_c^{-1} sum w_i y_i`` over controls;
    ATC uses weights on the treated group; ATE weights both groups
    (``weights`` is a (control, treated) pair).
    """
    yc, yt = _groups(y, treatment)
    if estimand is Estimand.ATT:
        w = _weights_for(yc, weights, "control")
        return float(yt.mean() - w @ yc / yc.size)
    if estimand is Estimand.ATC:
        w = _weights_for(yt, weights, "treated")
        return float(w @ yt / yt.size - yc.mean())
    if estimand is Estimand.ATE:
        if not isinstance(weights, (tuple, list)) or len(weights) != 2:
            raise DataError("ATE weights must be a (control, treated) pair")
        w0 = _weights_for(yc, weights[0], "control")
        w1 = _weights_for(yt, weights[1], "treated")
        return float(w1 @ yt / yt.size - w0 @ yc / yc.size)
    raise DataError(f"unknown estimand {estimand!r}")


def augmented(
    y: np.ndarray,
    treatment: np.ndarray,
    weights,
    design,
    fits,
    estimand: Estimand,
) -> float:
    """Bias-corrected estimate: wdim minus the estimated leftover bias
    in the fitted outcome function."""
    point = wdim(y, treatment, weights, estimand)
    return point - bm.ewc_bias_estimate(weights, design, treatment, fits, estimand)


def variance_hat(
    y: np.ndarray,
    treatment: np.ndarray,
    weights,
    predictions,
    point: float,
    estimand: Estimand,
) -> float:
    """Variance estimate for the weighted difference in means.

    ``predictions`` holds fitted outcome values for every unit of the
    estimation sample: control-model predictions for the ATT,
    treated-model predictions for the ATC, and a (control-model,
    treated-model) pair for the ATE.
    """
    y = np.asarray(y, dtype=float)
    d = np.asarray(treatment)
    control = d == 0
    treated = d == 1
    n_c = int(control.sum())
    n_t = int(treated.sum())
    if n_c == 0 or n_t == 0:
        raise DataError("need at least one control and one treated unit")
    if estimand is Estimand.ATT:
        f0 = np.asarray(predictions, dtype=float)
        w = _weights_for(y[control], weights, "control")
        lead = np.sum((y[treated] - f0[treated] - point) ** 2) / n_t**2
        tail = np.sum(w**2 * (y[control] - f0[control]) ** 2) / n_c**2
        return float(lead + tail)
    if estimand is Estimand.ATC:
        f1 = np.asarray(predictions, dtype=float)
        w = _weights_for(y[treated], weights, "treated")
        lead = np.sum((f1[control] - y[control] - point) ** 2) / n_c**2
        tail = np.sum(w**2 * (y[treated] - f1[treated]) ** 2) / n_t**2
        return float(lead + tail)
    if estimand is Estimand.ATE:
        if not isinstance(predictions, (tuple, list)) or len(predictions) != 2:
            raise DataError("ATE predictions must be a (control, treated) pair")
        f0 = np.asarray(predictions[0], dtype=float)
        f1 = np.asarray(predictions[1], dtype=float)
        w0 = _weights_for(y[control], weights[0], "control")
        w1 = _weights_for(y[treated], weights[1], "treated")
        n = y.shape[0]
        lead = np.sum((f1 - f0 - point) ** 2) / n**2
        mid = np.sum(w0**2 * (y[control] - f0[control]) ** 2) / n_c**2
        tail = np.sum(w1**2 * (y[treated] - f1[treated]) ** 2) / n_t**2
        return float(lead + mid + tail)
    raise DataError(f"unknown estimand {estimand!r}")


def confidence_interval(point: float, variance: float, gamma: float = 0.95):
    """Symmetric normal interval ``point +- z_{(1+gamma)/2} sqrt(variance)``."""
    if not 0.0 < gamma < 1.0:
        raise DataError(f"gamma must lie in (0, 1), got {gamma!r}")
    if not np.isfinite(variance) or variance < 0:
        raise DataError(f"variance must be finite and nonnegative, got {variance!r}")
    z = bm.normal_quantile(0.5 * (1.0 + gamma))
    half = z * np.sqrt(variance)
    return float(point - half), float(point + half)


def median_aggregate(points, variances, n: int) -> tuple[float, float]:
    """Median point and variance across sample splits.

    The variance is the median of ``V_s + (tau_s - tau_med)^2 / n``,
    which charges each split for its deviation from the median point.
    """
    points = np.asarray(points, dtype=float)
    variances = np.asarray(variances, dtype=float)
    if points.ndim != 1 or points.size == 0 or points.shape != variances.shape:
        raise DataError("points and variances must be matching nonempty 1-d arrays")
    if n < 1:
        raise DataError(f"sample size must be positive, got {n}")
    med = float(np.median(points))
    var = float(np.median(variances + (points - med) ** 2 / n))
    return med, var


# --------------------------------------------------------------------------
# Cross-fitting
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class EstimatorConfig:
    """Configuration for model-driven balancing estimates."""

    backend: str = "ols"
    estimand: Estimand = Estimand.ATT
    q: float = 0.95
    gamma: float = 0.95
    kernel_bandwidth: float | None = None
    cv: CvConfig = CvConfig()
    bootstrap_reps: int = 200
    solver: SolverConfig = SolverConfig()

    def __post_init__(self):
        if self.backend not in ("ols", "krls", "lasso"):
            raise DataError(
                f"unknown backend {self.backend!r}; expected ols, krls, or lasso"
            )
        if self.kernel_bandwidth is not None and self.backend != "krls":
            raise DataError("kernel_bandwidth only applies to the krls backend")
        if not 0.0 < self.q < 1.0:
            raise DataError(f"q must lie in (0, 1), got {self.q!r}")
        if not 0.0 < self.gamma < 1.0:
            raise DataError(f"gamma must lie in (0, 1), got {self.gamma!r}")


def _fit_one_group(ds: Dataset, rows: np.ndarray, config: EstimatorConfig, seed: int):
    x = ds.x[rows]
    y = ds.y[rows]
    if config.backend == "ols":
        return fit_ols_sandwich(x, y)
    if config.backend == "krls":
        bandwidth = (
            config.kernel_bandwidth
            if config.kernel_bandwidth is not None
            else default_bandwidth(ds.p)
        )
        spec = KernelSpec(bandwidth=bandwidth)
        cv = CvConfig(
            lambda_grid=config.cv.lambda_grid, folds=config.cv.folds, seed=seed
        )
        return fit_krls(gram_square(x, spec), y, cv, anchors=x, kernel=spec)
    cv = CvConfig(lambda_grid=config.cv.lambda_grid, folds=config.cv.folds, seed=seed)
    return fit_lasso_bootstrap(
        x, y, cv, bootstrap_reps=config.bootstrap_reps, seed=seed + 1
    )


def fit_outcome_models(
    ds: Dataset, config: EstimatorConfig, fit_rows: np.ndarray, seed: int = 0
):
    """Fit the outcome model(s) needed for ``config.estimand`` on
    ``fit_rows`` (internal row indices).

    Returns the control fit for the ATT, the treated fit for the ATC,
    and a (control fit, treated fit) pair for the ATE.
    """
    fit_rows = np.asarray(fit_rows)
    control_rows = fit_rows[ds.d[fit_rows] == 0]
    treated_rows = fit_rows[ds.d[fit_rows] == 1]
    if config.estimand is Estimand.ATT:
        if control_rows.size < 2:
            raise DataError("ATT fitting needs at least 2 control units")
        return _fit_one_group(ds, control_rows, config, seed)
    if config.estimand is Estimand.ATC:
        if treated_rows.size < 2:
            raise DataError("ATC fitting needs at least 2 treated units")
        return _fit_one_group(ds, treated_rows, config, seed)
    if control_rows.size < 2 or treated_rows.size < 2:
        raise DataError("ATE fitting needs at least 2 units per group")
    return (
        _fit_one_group(ds, control_rows, config, seed),
        _fit_one_group(ds, treated_rows, config, seed + 7),
    )


def _design_for(fits, x: np.ndarray, estimand: Estimand):
    if estimand is Estimand.ATE:
        return (fits[0].feature_map.transform(x), fits[1].feature_map.transform(x))
    return fits.feature_map.transform(x)


def _predictions_for(fits, x: np.ndarray, estimand: Estimand):
    if estimand is Estimand.ATE:
        return (predict(fits[0], x), predict(fits[1], x))
    return predict(fits, x)


@dataclass(frozen=True)
class FoldEstimate:
    """Estimate formed on one fold using the other fold's fit."""

    fit_fold: int
    estimate_fold: int
    point: float
    augmented_point: float
    variance: float
    weights: np.ndarray | tuple[np.ndarray, np.ndarray]
    weighted_rows: np.ndarray | tuple[np.ndarray, np.ndarray]
    estimate_rows: np.ndarray
    tfi_total: float
    tfi_chi_sq_term: float
    tfi_prediction_term: float
    objective: float
    converged: bool
    iterations: int


@dataclass(frozen=True)
class SplitResult:
    """Both fold estimates for one random split, and their combination."""

    seed: int
    folds: tuple[FoldEstimate, FoldEstimate]
    point: float
    augmented_point: float
    variance: float


def cross_fit_estimate(
    ds: Dataset, config: EstimatorConfig, seed: int
) -> SplitResult:
    """One honest split: fit on fold A, weight and estimate on fold B,
    switch roles, and average.

    The combined point is the mean of the two fold estimates and the
    combined variance is ``V1/4 + V2/4``.
    """
    assignment = split_sample(ds, seed)
    folds = []
    for fit_fold in (0, 1):
        est_fold = 1 - fit_fold
        fit_rows = assignment.rows(fit_fold)
        est_rows = assignment.rows(est_fold)
        fits = fit_outcome_models(ds, config, fit_rows, seed=seed * 2 + fit_fold)
        x_est = ds.x[est_rows]
        y_est = ds.y[est_rows]
        d_est = ds.d[est_rows]
        design = _design_for(fits, x_est, config.estimand)
        problem = build_problem(design, d_est, fits, config.q, config.estimand)
        solution = solve(problem, config.solver)
        w = solution.weights
        point = wdim(y_est, d_est, w, config.estimand)
        aug = point - bm.ewc_bias_estimate(w, design, d_est, fits, config.estimand)
        preds = _predictions_for(fits, x_est, config.estimand)
        var = variance_hat(y_est, d_est, w, preds, point, config.estimand)
        if config.estimand is Estimand.ATE:
            rows: np.ndarray | tuple = (
                est_rows[d_est == 0],
                est_rows[d_est == 1],
            )
        elif config.estimand is Estimand.ATT:
            rows = est_rows[d_est == 0]
        else:
            rows = est_rows[d_est == 1]
        folds.append(
            FoldEstimate(
                fit_fold=fit_fold,
                estimate_fold=est_fold,
                point=point,
                augmented_point=aug,
                variance=var,
                weights=w,
                weighted_rows=rows,
                estimate_rows=est_rows,
                tfi_total=solution.tfi_report.total,
                tfi_chi_sq_term=solution.tfi_report.chi_sq_term,
                tfi_prediction_term=solution.tfi_report.prediction_term,
                objective=solution.objective,
                converged=solution.converged,
                iterations=solution.iterations,
            )
        )
    point = 0.5 * (folds[0].point + folds[1].point)
    aug = 0.5 * (folds[0].augmented_point + folds[1].augmented_point)
    variance = 0.25 * folds[0].variance + 0.25 * folds[1].variance
    return SplitResult(
        seed=seed,
        folds=(folds[0], folds[1]),
        point=point,
        augmented_point=aug,
        variance=variance,
    )


@dataclass(frozen=True)
class SplitEstimate:
    """Cross-fit estimates over repeated splits with median aggregation."""

    splits: tuple[SplitResult, ...]
    n_splits: int
    base_seed: int
    point: float
    variance: float
    augmented_point: float
    augmented_variance: float


def estimate_with_splits(
    ds: Dataset, config: EstimatorConfig, n_splits: int = 100, base_seed: int = 0
) -> SplitEstimate:
    """Run :func:`cross_fit_estimate` over ``n_splits`` seeds (base+s) and
    aggregate points/variances by medians."""
    if n_splits < 1:
        raise DataError(f"need at least one split, got {n_splits}")
    splits = tuple(
        cross_fit_estimate(ds, config, base_seed + s) for s in range(n_splits)
    )
    points = [s.point for s in splits]
    variances = [s.variance for s in splits]
    point, variance = median_aggregate(points, variances, ds.n)
    aug_points = [s.augmented_point for s in splits]
    aug_point, aug_variance = median_aggregate(aug_points, variances, ds.n)
    return SplitEstimate(
        splits=splits,
        n_splits=n_splits,
        base_seed=base_seed,
        point=point,
        variance=variance,
        augmented_point=aug_point,
        augmented_variance=aug_variance,
    )


def fit_full_sample(ds: Dataset, config: EstimatorConfig, seed: int = 0):
    """Outcome model fit(s) on the whole sample, with the matching solver
    design.  Deterministic given ``(ds, config, seed)``."""
    fits = fit_outcome_models(ds, config, np.arange(ds.n), seed=seed)
    design = _design_for(fits, ds.x, config.estimand)
    return fits, design


def solve_full_sample(ds: Dataset, config: EstimatorConfig, seed: int = 0):
    """Fit on the whole sample and solve for balancing weights against
    that fit (no cross-fitting).  Returns ``(fits, design, solution)``."""
    fits, design = fit_full_sample(ds, config, seed)
    problem = build_problem(design, ds.d, fits, config.q, config.estimand)
    solution = solve(problem, config.solver)
    return fits, design, solution


# --------------------------------------------------------------------------
# Reporting
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class ImbalanceTable:
    """Initial vs post-weighting covariate imbalance for one weighted group."""

    side: str
    columns: tuple[str, ...]
    initial: np.ndarray
    weighted: np.ndarray  # mean across splits and folds


@dataclass(frozen=True)
class EstimateReport:
    """Full estimation summary assembled for output."""

    estimand: Estimand
    backend: str
    q: float
    gamma: float
    n: int
    n_control: int
    n_treated: int
    n_splits: int
    base_seed: int
    point: float
    variance: float
    ci: tuple[float, float]
    augmented_point: float
    augmented_variance: float
    augmented_ci: tuple[float, float]
    ress: dict
    imbalance_tables: tuple[ImbalanceTable, ...]
    estimate: SplitEstimate = field(repr=False)


def build_report(
    ds: Dataset,
    config: EstimatorConfig,
    estimate: SplitEstimate,
) -> EstimateReport:
    """Summarize a :class:`SplitEstimate` with intervals, effective sample
    sizes, and covariate imbalance tables."""
    ci = confidence_interval(estimate.point, estimate.variance, config.gamma)
    aug_ci = confidence_interval(
        estimate.augmented_point, estimate.augmented_variance, config.gamma
    )

    sides: dict[str, list[np.ndarray]] = {}
    ress_acc: dict[str, list[float]] = {}
    for split in estimate.splits:
        for fold in split.folds:
            if config.estimand is Estimand.ATE:
                labels = ("ate_control", "ate_treated")
                weight_sets = fold.weights
            else:
                labels = ("att" if config.estimand is Estimand.ATT else "atc",)
                weight_sets = (fold.weights,)
            for label, w in zip(labels, weight_sets):
                ress_acc.setdefault(label, []).append(bm.ress(w))
    ress_summary = {label: float(np.mean(vals)) for label, vals in ress_acc.items()}

    for split in estimate.splits:
        for fold in split.folds:
            for label, u in _fold_covariate_imbalance(ds, fold, config.estimand).items():
                sides.setdefault(label, []).append(u)
    initial = _initial_covariate_imbalance(ds, config.estimand)
    tables = tuple(
        ImbalanceTable(
            side=label,
            columns=ds.columns,
            initial=initial[label],
            weighted=np.mean(np.stack(vec_list), axis=0),
        )
        for label, vec_list in sides.items()
    )

    return EstimateReport(
        estimand=config.estimand,
        backend=config.backend,
        q=config.q,
        gamma=config.gamma,
        n=ds.n,
        n_control=ds.n_control,
        n_treated=ds.n_treated,
        n_splits=estimate.n_splits,
        base_seed=estimate.base_seed,
        point=estimate.point,
        variance=estimate.variance,
        ci=ci,
        augmented_point=estimate.augmented_point,
        augmented_variance=estimate.augmented_variance,
        augmented_ci=aug_ci,
        ress=ress_summary,
        imbalance_tables=tables,
        estimate=estimate,
    )


def _initial_covariate_imbalance(ds: Dataset, estimand: Estimand):
    d = ds.d
    x = ds.x
    if estimand is Estimand.ATE:
        return {
            "ate_control": bm.imbalance(
                np.ones(ds.n_control), x, d, Estimand.ATE, side=0
            ),
            "ate_treated": bm.imbalance(
                np.ones(ds.n_treated), x, d, Estimand.ATE, side=1
            ),
        }
    if estimand is Estimand.ATT:
        return {"att": bm.imbalance(np.ones(ds.n_control), x, d, Estimand.ATT)}
    return {"atc": bm.imbalance(np.ones(ds.n_treated), x, d, Estimand.ATC)}


def _fold_covariate_imbalance(ds: Dataset, fold: FoldEstimate, estimand: Estimand):
    """Imbalance in the dataset's covariates within the estimation fold."""
    rows = fold.estimate_rows
    d = ds.d[rows]
    x = ds.x[rows]
    if estimand is Estimand.ATE:
        return {
            "ate_control": bm.imbalance(fold.weights[0], x, d, Estimand.ATE, side=0),
            "ate_treated": bm.imbalance(fold.weights[1], x, d, Estimand.ATE, side=1),
        }
    if estimand is Estimand.ATT:
        return {"att": bm.imbalance(fold.weights, x, d, Estimand.ATT)}
    return {"atc": bm.imbalance(fold.weights, x, d, Estimand.ATC)}
