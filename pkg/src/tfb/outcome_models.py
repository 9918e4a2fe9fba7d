"""Outcome regressions whose uncertainty drives the balance metric.

Each backend returns an :class:`OutcomeModelFit` holding coefficients, an
estimated covariance matrix for those coefficients, the residual variance,
and a feature map that rebuilds design rows for new points:

* ``fit_ols_sandwich``: least squares with a prepended constant column and
  a heteroskedasticity-robust (sandwich) coefficient covariance.
* ``fit_krls``: kernel ridge regression on a gram matrix, with the ridge
  penalty chosen by k-fold cross-validation.
* ``fit_lasso_bootstrap``: L1-penalized regression (coordinate descent via
  scikit-learn) with the penalty chosen by k-fold cross-validation and the
  coefficient covariance estimated by a residual bootstrap.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from sklearn.exceptions import ConvergenceWarning
from sklearn.linear_model import Lasso

from .errors import DataError, NumericalError
from .kernels import KernelSpec, kernel_features

# --------------------------------------------------------------------------
# Feature maps
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class LinearMap:
    """Design rows are the inputs themselves, optionally with a 1 prepended."""

    n_inputs: int
    add_intercept: bool = False

    def transform(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        if single:
            x = x[None, :]
        if x.shape[1] != self.n_inputs:
            raise DataError(
                f"feature map expects {self.n_inputs} columns, got {x.shape[1]}"
            )
        if self.add_intercept:
            x = np.hstack([np.ones((x.shape[0], 1)), x])
        return x[0] if single else x


@dataclass(frozen=True)
class KernelMap:
    """Design rows are Gaussian kernel evaluations against anchor points."""

    anchors: np.ndarray
    spec: KernelSpec

    def transform(self, x: np.ndarray) -> np.ndarray:
        return kernel_features(x, self.anchors, self.spec)


# --------------------------------------------------------------------------
# Fit container and cross-validation configuration
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class CvConfig:
    """K-fold cross-validation settings for penalized backends.

    ``lambda_grid`` must be strictly increasing when given; when omitted a
    data-driven default of 50 log-spaced values spanning 1e-4 to 1e2 times
    the backend's scale is used.  Ties in CV error break toward the larger
    penalty.
    """

    lambda_grid: np.ndarray | None = None
    folds: int = 5
    seed: int = 0

    def grid(self, scale: float) -> np.ndarray:
        if self.lambda_grid is not None:
            grid = np.asarray(self.lambda_grid, dtype=float)
            if grid.ndim != 1 or grid.size == 0:
                raise DataError("lambda grid must be a nonempty 1-d array")
            if np.any(~np.isfinite(grid)) or np.any(grid <= 0):
                raise DataError("lambda grid values must be positive and finite")
            if grid.size > 1 and np.any(np.diff(grid) <= 0):
                raise DataError("lambda grid must be strictly increasing")
            return grid
        if not np.isfinite(scale) or scale <= 0:
            scale = 1.0
        return scale * np.logspace(-4.0, 2.0, 50)


@dataclass(frozen=True)
class OutcomeModelFit:
    """Fitted outcome regression with coefficient uncertainty.

    ``coefficients`` live in the design space produced by ``feature_map``;
    ``intercept`` is 0 whenever the backend absorbs it into the design
    (OLS prepends a constant column, KRLS has none).
    """

    backend: str
    coefficients: np.ndarray
    intercept: float
    coef_covariance: np.ndarray
    residual_variance: float
    feature_map: LinearMap | KernelMap
    n_fit: int
    diagnostics: dict = field(default_factory=dict)


def predict(fit: OutcomeModelFit, x: np.ndarray) -> np.ndarray:
    """Predicted outcomes for input rows ``x`` (mapped through the fit's
    feature map)."""
    design = fit.feature_map.transform(x)
    return design @ fit.coefficients + fit.intercept


def cv_fold_ids(n: int, folds: int, seed: int) -> np.ndarray:
    """Deterministic fold labels in {0..folds-1}, sizes as even as possible."""
    if folds < 2:
        raise DataError(f"cross-validation needs at least 2 folds, got {folds}")
    if folds > n:
        raise DataError(f"{folds} folds for {n} observations")
    rng = np.random.Generator(np.random.Philox(seed))
    ranks = np.argsort(rng.random(n), kind="stable")
    ids = np.empty(n, dtype=np.int64)
    ids[ranks] = np.arange(n) % folds
    return ids


def _pick_lambda(grid: np.ndarray, errors: np.ndarray) -> int:
    """Index of the best CV error, ties broken toward the larger lambda."""
    best = 0
    for i in range(1, grid.size):
        if errors[i] <= errors[best]:
            best = i
    return best


# --------------------------------------------------------------------------
# OLS with sandwich covariance
# --------------------------------------------------------------------------


def fit_ols_sandwich(x: np.ndarray, y: np.ndarray) -> OutcomeModelFit:
    """Least squares with an intercept column and sandwich covariance.

    The coefficient covariance is the heteroskedasticity-robust estimate
    ``(X'X)^{-1} X' diag(e^2) X (X'X)^{-1}`` with ``e`` the residuals,
    equivalently ``n^{-1} Ahat^{-1} Mhat Ahat^{-1}`` for the moment
    matrices ``Ahat = n^{-1} X'X`` and ``Mhat = n^{-1} sum e_i^2 x_i x_i'``.

    Raises
    ------
    NumericalError
        If the design is rank deficient (condition number of ``X'X``
        at or above 1e12); the message names the near-dependent columns.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    if y.shape != (x.shape[0],):
        raise DataError(
            f"outcome shape {y.shape} does not match {x.shape[0]} design rows"
        )
    fmap = LinearMap(n_inputs=x.shape[1], add_intercept=True)
    design = fmap.transform(x)
    m, p_model = design.shape
    if m < p_model:
        raise DataError(f"{m} observations cannot identify {p_model} coefficients")

    _, svals, vt = np.linalg.svd(design, full_matrices=False)
    cond_sq = np.inf if svals[-1] == 0 else (svals[0] / svals[-1]) ** 2
    if cond_sq >= 1e12:
        direction = vt[-1]
        names = ["intercept"] + [f"column {j}" for j in range(x.shape[1])]
        involved = [
            names[j]
            for j in np.flatnonzero(np.abs(direction) > 0.1 * np.abs(direction).max())
        ]
        raise NumericalError(
            "rank-deficient design (condition estimate "
            f"{cond_sq:.2e}); near-dependent columns: {', '.join(involved)}"
        )

    beta, *_ = np.linalg.lstsq(design, y, rcond=None)
    resid = y - design @ beta
    bread = design.T @ design
    meat = design.T @ (resid[:, None] ** 2 * design)
    half = np.linalg.solve(bread, meat)
    cov = np.linalg.solve(bread, half.T).T
    cov = 0.5 * (cov + cov.T)
    return OutcomeModelFit(
        backend="ols",
        coefficients=beta,
        intercept=0.0,
        coef_covariance=cov,
        residual_variance=float(np.mean(resid**2)),
        feature_map=fmap,
        n_fit=m,
        diagnostics={"condition": float(cond_sq)},
    )


# --------------------------------------------------------------------------
# Kernel-regularized least squares
# --------------------------------------------------------------------------


def fit_krls(
    k_cc: np.ndarray,
    y: np.ndarray,
    cv: CvConfig = CvConfig(),
    anchors: np.ndarray | None = None,
    kernel: KernelSpec | None = None,
) -> OutcomeModelFit:
    """Kernel ridge regression ``alpha = (K + lambda I)^{-1} y``.

    ``k_cc`` is the gram matrix of the fitted sample against itself.  The
    ridge ``lambda`` is chosen from the grid by k-fold CV mean squared
    prediction error (ties toward the larger value).  The coefficient
    covariance is ``sigma2 * (K + lambda I)^{-2}`` with ``sigma2`` the
    mean squared residual.

    When ``anchors`` (the fitted sample's covariate rows) and ``kernel``
    are given, the fit predicts from raw covariates; otherwise callers
    must supply precomputed kernel rows as the design.
    """
    k_cc = np.asarray(k_cc, dtype=float)
    y = np.asarray(y, dtype=float)
    m = y.shape[0]
    if k_cc.shape != (m, m):
        raise DataError(f"gram matrix shape {k_cc.shape} does not match {m} outcomes")
    if not np.allclose(k_cc, k_cc.T, atol=1e-10 * (1.0 + np.abs(k_cc).max())):
        raise DataError("gram matrix is not symmetric")

    grid = cv.grid(float(np.trace(k_cc)) / m)
    fold_ids = cv_fold_ids(m, cv.folds, cv.seed)
    sse = np.zeros(grid.size)
    for f in range(cv.folds):
        val = fold_ids == f
        train = ~val
        k_tt = k_cc[np.ix_(train, train)]
        evals, evecs = np.linalg.eigh(k_tt)
        evals = np.maximum(evals, 0.0)
        coef = evecs.T @ y[train]
        cross = k_cc[np.ix_(val, train)] @ evecs
        # predictions for all lambdas at once: (n_val, n_train) x (n_train, L)
        preds = cross @ (coef[:, None] / (evals[:, None] + grid[None, :]))
        sse += np.sum((y[val][:, None] - preds) ** 2, axis=0)
    pick = _pick_lambda(grid, sse)
    lam = float(grid[pick])

    evals, evecs = np.linalg.eigh(k_cc)
    if evals.min() < -1e-8 * max(1.0, float(np.trace(k_cc))):
        raise NumericalError(
            f"gram matrix is not PSD: min eigenvalue {evals.min():.3e}"
        )
    evals = np.maximum(evals, 0.0)
    alpha = evecs @ ((evecs.T @ y) / (evals + lam))
    resid = y - k_cc @ alpha
    sigma2 = float(np.mean(resid**2))
    cov = (evecs * (sigma2 / (evals + lam) ** 2)) @ evecs.T
    cov = 0.5 * (cov + cov.T)
    if anchors is not None:
        if kernel is None:
            raise DataError("anchors were given without a kernel spec")
        fmap: LinearMap | KernelMap = KernelMap(
            anchors=np.asarray(anchors, dtype=float), spec=kernel
        )
    else:
        fmap = LinearMap(n_inputs=m, add_intercept=False)
    return OutcomeModelFit(
        backend="krls",
        coefficients=alpha,
        intercept=0.0,
        coef_covariance=cov,
        residual_variance=sigma2,
        feature_map=fmap,
        n_fit=m,
        diagnostics={"lambda": lam, "cv_sse": sse, "lambda_grid": grid},
    )


# --------------------------------------------------------------------------
# LASSO with residual bootstrap
# --------------------------------------------------------------------------


def _lasso_path_fit(xs, yc, grid_desc, gram, tol, max_iter):
    """Coefficients at each lambda (descending), warm-started."""
    model = Lasso(
        alpha=float(grid_desc[0]),
        fit_intercept=False,
        warm_start=True,
        tol=tol,
        max_iter=max_iter,
        precompute=gram if gram is not None else True,
    )
    out = np.empty((grid_desc.size, xs.shape[1]))
    for i, lam in enumerate(grid_desc):
        model.set_params(alpha=float(lam))
        model.fit(xs, yc)
        out[i] = model.coef_
    return out


def fit_lasso_bootstrap(
    x: np.ndarray,
    y: np.ndarray,
    cv: CvConfig = CvConfig(),
    bootstrap_reps: int = 200,
    seed: int = 0,
    tol: float = 1e-6,
    max_iter: int = 20_000,
) -> OutcomeModelFit:
    """L1-penalized regression with a residual-bootstrap covariance.

    The design columns are standardized internally for the penalty path
    and coefficients are reported on the original scale; the intercept is
    unpenalized (handled by centering).  ``lambda`` multiplies the L1 norm
    in the objective ``(2m)^{-1} ||y - Xb||^2 + lambda ||b||_1`` and is
    chosen by k-fold CV with ties toward the larger value.

    The coefficient covariance is the empirical covariance of
    ``bootstrap_reps`` refits at the chosen lambda on outcomes rebuilt
    from the fitted values plus resampled centered residuals.

    ``tol`` governs the base fit whose coefficients are reported; the
    CV ranking and the bootstrap refits run at a tolerance no tighter
    than 1e-4 since they only rank lambdas / sketch coefficient spread.

    Raises
    ------
    DataError
        If ``bootstrap_reps`` is below 20 (too few for a covariance).
    """
    if bootstrap_reps < 20:
        raise DataError(
            f"bootstrap_reps must be at least 20, got {bootstrap_reps}"
        )
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    m, p = x.shape
    if y.shape != (m,):
        raise DataError(f"outcome shape {y.shape} does not match {m} design rows")

    x_mean = x.mean(axis=0)
    x_sd = x.std(axis=0, ddof=1) if m > 1 else np.ones(p)
    x_sd = np.where(x_sd == 0, 1.0, x_sd)
    xs = (x - x_mean) / x_sd
    y_mean = float(y.mean())
    yc = y - y_mean

    scale = float(np.max(np.abs(xs.T @ yc)) / m) if m else 1.0
    grid = cv.grid(scale)
    grid_desc = grid[::-1]

    if not np.any(yc):
        # Constant outcome: every lambda yields all-zero coefficients and
        # zero residuals, so skip the solver entirely (the coordinate
        # descent backend cannot meet a zero tolerance on zero data).
        return OutcomeModelFit(
            backend="lasso",
            coefficients=np.zeros(p),
            intercept=y_mean,
            coef_covariance=np.zeros((p, p)),
            residual_variance=0.0,
            feature_map=LinearMap(n_inputs=p, add_intercept=False),
            n_fit=m,
            diagnostics={
                "lambda": float(grid[-1]),
                "cv_sse": np.zeros(grid.size),
                "lambda_grid": grid,
                "bootstrap_reps": bootstrap_reps,
            },
        )

    loose_tol = max(tol, 1e-4)
    fold_ids = cv_fold_ids(m, cv.folds, cv.seed)
    sse_desc = np.zeros(grid.size)
    with warnings.catch_warnings():
        # Ranking-only fits: a path point at an extreme lambda that stops
        # at max_iter still ranks correctly, so its convergence chatter
        # is noise.  The reported base fit below is NOT suppressed.
        warnings.simplefilter("ignore", category=ConvergenceWarning)
        for f in range(cv.folds):
            val = fold_ids == f
            train = ~val
            xtr = xs[train]
            ytr = yc[train]
            offset = float(ytr.mean())
            gram_tr = xtr.T @ xtr
            betas = _lasso_path_fit(
                xtr, ytr - offset, grid_desc, gram_tr, loose_tol, max_iter
            )
            preds = xs[val] @ betas.T + offset
            sse_desc += np.sum((yc[val][:, None] - preds) ** 2, axis=0)
    sse = sse_desc[::-1]
    pick = _pick_lambda(grid, sse)
    lam = float(grid[pick])

    gram = xs.T @ xs
    path_to_lam = grid_desc[grid_desc >= lam * (1.0 - 1e-12)]
    base = _lasso_path_fit(xs, yc, path_to_lam, gram, tol, max_iter)[-1]
    fitted_c = xs @ base
    resid = yc - fitted_c
    resid_centered = resid - resid.mean()

    rng = np.random.Generator(np.random.Philox(seed))
    boot = np.empty((bootstrap_reps, p))
    model = Lasso(
        alpha=lam,
        fit_intercept=False,
        warm_start=True,
        tol=loose_tol,
        max_iter=max_iter,
        precompute=gram,
    )
    model.coef_ = base.copy()
    with warnings.catch_warnings():
        # Spread sketches at loose tolerance; see the CV note above.
        warnings.simplefilter("ignore", category=ConvergenceWarning)
        for b in range(bootstrap_reps):
            idx = np.floor(rng.random(m) * m).astype(np.int64)
            y_star = fitted_c + resid_centered[idx]
            model.fit(xs, y_star - y_star.mean())
            boot[b] = model.coef_ / x_sd
    cov = np.atleast_2d(np.cov(boot, rowvar=False, ddof=1))
    cov = 0.5 * (cov + cov.T)

    coef = base / x_sd
    intercept = y_mean - float(x_mean @ coef)
    return OutcomeModelFit(
        backend="lasso",
        coefficients=coef,
        intercept=intercept,
        coef_covariance=cov,
        residual_variance=float(np.mean(resid**2)),
        feature_map=LinearMap(n_inputs=p, add_intercept=False),
        n_fit=m,
        diagnostics={
            "lambda": lam,
            "cv_sse": sse,
            "lambda_grid": grid,
            "bootstrap_reps": bootstrap_reps,
        },
    )
