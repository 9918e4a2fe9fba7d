"""Balance diagnostics: imbalance vectors and the targeted imbalance metric.

The targeted function imbalance (TFI) of a weight vector combines two
pieces, both driven by a fitted outcome model with coefficients ``b`` and
estimated coefficient covariance ``V``:

* a variance term ``sqrt(Q_q(chi2_P)) * ||V^{1/2} imbal||_2``, where
  ``imbal`` is the vector of weighted imbalances in the model's design
  columns and ``Q_q`` is the chi-squared quantile with ``P`` equal to the
  coefficient dimension, and
* a prediction term ``|imbal' b|``, the imbalance in the fitted values.

Smaller TFI certifies (at confidence level ``q``) a smaller bias from
imbalance in the fitted outcome function.  This module also provides the
chi-squared and normal quantile routines used by that metric, implemented
directly so results are reproducible without an external stats library.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .dataset import Estimand
from .errors import DataError, NumericalError

# --------------------------------------------------------------------------
# Quantile functions
# --------------------------------------------------------------------------

# Rational approximations for the standard normal quantile (Wichura's
# PPND16 form): three branches, accurate to well below 1e-9 absolutely.
_PPND_A = (
    3.3871328727963666080e0,
    1.3314166789178437745e2,
    1.9715909503065514427e3,
    1.3731693765509461125e4,
    4.5921953931549871457e4,
    6.7265770927008700853e4,
    3.3430575583588128105e4,
    2.5090809287301226727e3,
)
_PPND_B = (
    1.0,
    4.2313330701600911252e1,
    6.8718700749205790830e2,
    5.3941960214247511077e3,
    2.1213794301586595867e4,
    3.9307895800092710610e4,
    2.8729085735721942674e4,
    5.2264952788528545610e3,
)
_PPND_C = (
    1.42343711074968357734e0,
    4.63033784615654529590e0,
    5.76949722146069140550e0,
    3.64784832476320460504e0,
    1.27045825245236838258e0,
    2.41780725177450611770e-1,
    2.27238449892691845833e-2,
    7.74545014278341407640e-4,
)
_PPND_D = (
    1.0,
    2.05319162663775882187e0,
    1.67638483018380384940e0,
    6.89767334985100004550e-1,
    1.48103976427480074590e-1,
    1.51986665636164571966e-2,
    5.47593808499534494600e-4,
    1.05075007164441684324e-9,
)
_PPND_E = (
    6.65790464350110377720e0,
    5.46378491116411436990e0,
    1.78482653991729133580e0,
    2.96560571828504891230e-1,
    2.65321895265761230930e-2,
    1.24266094738807843860e-3,
    2.71155556874348757815e-5,
    2.01033439929228813265e-7,
)
_PPND_F = (
    1.0,
    5.99832206555887937690e-1,
    1.36929880922735805310e-1,
    1.48753612908506148525e-2,
    7.86869131145613259100e-4,
    1.84631831751005468180e-5,
    1.42151175831644588870e-7,
    2.04426310338993978564e-15,
)


def _poly(coeffs, r: float) -> float:
    out = 0.0
    for c in reversed(coeffs):
        out = out * r + c
    return out


def normal_quantile(p: float) -> float:
    """Inverse standard normal CDF via a rational approximation.

    Parameters
    ----------
    p : float in (0, 1)

    Raises
    ------
    DataError
        If ``p`` is outside the open unit interval.
    """
    if not 0.0 < p < 1.0:
        raise DataError(f"normal quantile needs p in (0, 1), got {p!r}")
    q = p - 0.5
    if abs(q) <= 0.425:
        r = 0.180625 - q * q
        return q * _poly(_PPND_A, r) / _poly(_PPND_B, r)
    r = p if q < 0 else 1.0 - p
    r = math.sqrt(-math.log(r))
    if r <= 5.0:
        r -= 1.6
        val = _poly(_PPND_C, r) / _poly(_PPND_D, r)
    else:
        r -= 5.0
        val = _poly(_PPND_E, r) / _poly(_PPND_F, r)
    return -val if q < 0 else val


def _gammainc_lower(a: float, x: float) -> float:
    """Regularized lower incomplete gamma P(a, x).

    Series expansion for x < a + 1, Lentz continued fraction otherwise.
    Iteration caps scale with sqrt(a) so very large degrees of freedom
    converge; the series uses compensated summation to keep absolute
    error well below 1e-12 even after thousands of terms.
    """
    if x < 0 or a <= 0:
        raise DataError(f"incomplete gamma needs a > 0 and x >= 0, got {a}, {x}")
    if x == 0.0:
        return 0.0
    max_iter = int(10000 + 200 * math.sqrt(a))
    if x < a + 1.0:
        # P(a,x) = x^a e^-x / Gamma(a+1) * sum_n x^n / prod_{k<=n} (a+k)
        ap = a
        term = 1.0 / a
        total = term
        comp = 0.0
        for _ in range(max_iter):
            ap += 1.0
            term *= x / ap
            y = term - comp
            t = total + y
            comp = (t - total) - y
            total = t
            if abs(term) < abs(total) * 1e-17:
                return total * math.exp(-x + a * math.log(x) - math.lgamma(a))
        raise NumericalError("incomplete gamma series failed to converge")
    # Q(a,x) via Lentz's continued fraction, then P = 1 - Q.
    tiny = 1e-300
    b = x + 1.0 - a
    c = 1.0 / tiny
    d = 1.0 / b
    h = d
    for i in range(1, max_iter):
        an = -i * (i - a)
        b += 2.0
        d = an * d + b
        if abs(d) < tiny:
            d = tiny
        c = b + an / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < 1e-16:
            q = h * math.exp(-x + a * math.log(x) - math.lgamma(a))
            return 1.0 - q
    raise NumericalError("incomplete gamma continued fraction failed to converge")


def chi_sq_cdf(x: float, dof: float) -> float:
    """Chi-squared CDF with ``dof`` degrees of freedom."""
    if x <= 0.0:
        return 0.0
    return _gammainc_lower(0.5 * dof, 0.5 * x)


def chi_sq_quantile(q: float, dof: int) -> float:
    """Inverse chi-squared CDF by safeguarded Newton iteration.

    Starts from the Wilson-Hilferty approximation and iterates Newton
    steps on the regularized lower incomplete gamma, with bisection
    fallback.  Iteration stops once the CDF residual falls below 1e-13
    or stops improving (at large ``dof`` the CDF's own rounding noise
    is the floor); the best iterate must have residual below 1e-10 or
    an error is raised.

    Parameters
    ----------
    q : float in (0, 1)
    dof : positive degrees of freedom

    Raises
    ------
    DataError
        If ``q`` or ``dof`` is out of range.
    """
    if not 0.0 < q < 1.0:
        raise DataError(f"chi-squared quantile needs q in (0, 1), got {q!r}")
    p = float(dof)
    if not p >= 1.0 or not np.isfinite(p):
        raise DataError(f"degrees of freedom must be >= 1, got {dof!r}")
    a = 0.5 * p

    z = normal_quantile(q)
    h = 2.0 / (9.0 * p)
    t = p * (1.0 - h + z * math.sqrt(h)) ** 3
    if not np.isfinite(t) or t <= 0.0:
        t = p * math.exp((z - 1.0) / math.sqrt(p))  # crude positive fallback
    lo, hi = 0.0, math.inf
    best_t, best_res = t, math.inf
    stale = 0
    for _ in range(200):
        f = _gammainc_lower(a, 0.5 * t) - q
        if abs(f) < best_res:
            best_t, best_res = t, abs(f)
            stale = 0
        else:
            stale += 1
        if best_res < 1e-13 or stale >= 8:
            break
        if f > 0:
            hi = t
        else:
            lo = t
        log_pdf = -math.log(2.0) + (a - 1.0) * math.log(0.5 * t) - 0.5 * t - math.lgamma(a)
        step = f / math.exp(log_pdf) if log_pdf > -700 else math.inf
        t_new = t - step
        if not lo < t_new < hi:
            t_new = 2.0 * lo + 1.0 if math.isinf(hi) else 0.5 * (lo + hi)
        if t_new == t:
            break
        t = t_new
    if best_res < 1e-10:
        return best_t
    raise NumericalError(
        f"chi-squared quantile did not reach 1e-10 residual for q={q}, dof={dof}"
    )


# --------------------------------------------------------------------------
# Imbalance
# --------------------------------------------------------------------------


def _split_design(design: np.ndarray, treatment: np.ndarray):
    d = np.asarray(treatment)
    design = np.asarray(design, dtype=float)
    if design.ndim == 1:
        design = design[:, None]
    if design.shape[0] != d.shape[0]:
        raise DataError(
            f"design has {design.shape[0]} rows for {d.shape[0]} treatment values"
        )
    control = design[d == 0]
    treated = design[d == 1]
    if control.shape[0] == 0 or treated.shape[0] == 0:
        raise DataError("need at least one control and one treated unit")
    return design, control, treated


def _check_weights(weights: np.ndarray, m: int, label: str) -> np.ndarray:
    w = np.asarray(weights, dtype=float)
    if w.shape != (m,):
        raise DataError(f"{label} weights have shape {w.shape}, expected ({m},)")
    if not np.all(np.isfinite(w)):
        raise DataError(f"{label} weights contain non-finite values")
    return w


def imbalance(
    weights: np.ndarray,
    design: np.ndarray,
    treatment: np.ndarray,
    estimand: Estimand = Estimand.ATT,
    side: int | None = None,
) -> np.ndarray:
    """Weighted imbalance vector over the design columns.

    For the ATT the weights sit on controls and the vector is
    ``mean(treated) - weighted mean(controls)``; for the ATC the weights
    sit on treated units and the vector is ``weighted mean(treated) -
    mean(controls)``.  For the ATE, ``side`` selects the weighted group
    (0 for controls, 1 for treated) and the target is the full-sample
    mean: ``mean(all) - weighted mean(group)``.
    """
    design, control, treated = _split_design(design, treatment)
    if estimand is Estimand.ATT:
        w = _check_weights(weights, control.shape[0], "control")
        return treated.mean(axis=0) - control.T @ w / control.shape[0]
    if estimand is Estimand.ATC:
        w = _check_weights(weights, treated.shape[0], "treated")
        return treated.T @ w / treated.shape[0] - control.mean(axis=0)
    if estimand is Estimand.ATE:
        if side not in (0, 1):
            raise DataError("ATE imbalance needs side=0 (control) or side=1 (treated)")
        group = control if side == 0 else treated
        label = "control" if side == 0 else "treated"
        w = _check_weights(weights, group.shape[0], label)
        return design.mean(axis=0) - group.T @ w / group.shape[0]
    raise DataError(f"unknown estimand {estimand!r}")


def ress(weights: np.ndarray) -> float:
    """Relative effective sample size of a weighted group.

    ``(sum w)^2 / (m * sum w^2)`` for a group of size ``m``; equals 1 for
    uniform weights and decreases as the weights concentrate.
    """
    w = np.asarray(weights, dtype=float)
    if w.ndim != 1 or w.size == 0:
        raise DataError("weights must be a nonempty one-dimensional array")
    denom = w.size * float(w @ w)
    if denom == 0.0:
        raise DataError("all-zero weights have no effective sample size")
    return float(np.sum(w)) ** 2 / denom


# --------------------------------------------------------------------------
# Targeted function imbalance
# --------------------------------------------------------------------------


def psd_sqrt_factor(cov: np.ndarray) -> np.ndarray:
    """Factor S with ``S'S`` the PSD part of ``cov`` (so ||Su|| = ||cov^{1/2}u||).

    Eigenvalues below ``-1e-8 * max(1, trace)`` raise; small negative
    eigenvalues within that tolerance are clipped to zero.
    """
    cov = np.asarray(cov, dtype=float)
    if cov.ndim != 2 or cov.shape[0] != cov.shape[1]:
        raise DataError(f"covariance must be square, got shape {cov.shape}")
    if not np.allclose(cov, cov.T, atol=1e-10 * (1.0 + np.abs(cov).max())):
        raise DataError("covariance matrix is not symmetric")
    evals, evecs = np.linalg.eigh(0.5 * (cov + cov.T))
    tol = 1e-8 * max(1.0, float(np.trace(cov)))
    if evals.min() < -tol:
        raise NumericalError(
            f"coefficient covariance is not PSD: min eigenvalue {evals.min():.3e}"
        )
    clipped = np.maximum(evals, 0.0)
    return np.sqrt(clipped)[:, None] * evecs.T


@dataclass(frozen=True)
class TfiSide:
    """One side's contribution to the targeted imbalance metric."""

    label: str
    imbalance: np.ndarray
    dof: int
    chi_sq_term: float
    prediction_term: float

    @property
    def total(self) -> float:
        return self.chi_sq_term + self.prediction_term


@dataclass(frozen=True)
class TfiReport:
    """Targeted function imbalance of a weighting, with its components."""

    q: float
    estimand: Estimand
    sides: tuple[TfiSide, ...]

    @property
    def chi_sq_term(self) -> float:
        return sum(s.chi_sq_term for s in self.sides)

    @property
    def prediction_term(self) -> float:
        return sum(s.prediction_term for s in self.sides)

    @property
    def total(self) -> float:
        return self.chi_sq_term + self.prediction_term


def _as_pair(value):
    if isinstance(value, (tuple, list)):
        if len(value) != 2:
            raise DataError("ATE inputs must be (control, treated) pairs")
        return value[0], value[1]
    return value, value


def _require_pair(value, what: str):
    if not isinstance(value, (tuple, list)) or len(value) != 2:
        raise DataError(f"ATE requires a (control, treated) pair of {what}")
    return value[0], value[1]


def _side_terms(u: np.ndarray, fit, q: float) -> tuple[int, float, float]:
    beta = np.asarray(fit.coefficients, dtype=float)
    if beta.shape[0] != u.shape[0]:
        raise DataError(
            f"fit dimension {beta.shape[0]} does not match design columns {u.shape[0]}"
        )
    sqrt_factor = psd_sqrt_factor(fit.coef_covariance)
    dof = beta.shape[0]
    chi = math.sqrt(chi_sq_quantile(q, dof)) * float(np.linalg.norm(sqrt_factor @ u))
    pred = abs(float(beta @ u))
    return dof, chi, pred


def tfi(
    weights,
    design,
    treatment: np.ndarray,
    fits,
    q: float = 0.95,
    estimand: Estimand = Estimand.ATT,
) -> TfiReport:
    """Targeted function imbalance of ``weights`` under fitted model(s).

    Parameters
    ----------
    weights : array or (array, array)
        Weights on the weighted group; for the ATE a (control, treated)
        pair.
    design : array or (array, array)
        Model design over all units, control-first; for the ATE a pair
        when the two sides use different designs.
    fits : OutcomeModelFit or (fit0, fit1)
        Fit whose coefficients/covariance drive the metric: the control
        fit for the ATT, the treated fit for the ATC, both for the ATE.
    q : float
        Confidence level of the chi-squared quantile.
    """
    if not 0.0 < q < 1.0:
        raise DataError(f"q must lie in (0, 1), got {q!r}")
    if estimand is Estimand.ATT:
        u = imbalance(weights, design, treatment, Estimand.ATT)
        dof, chi, pred = _side_terms(u, fits, q)
        sides = (TfiSide("att", u, dof, chi, pred),)
    elif estimand is Estimand.ATC:
        u = imbalance(weights, design, treatment, Estimand.ATC)
        dof, chi, pred = _side_terms(u, fits, q)
        sides = (TfiSide("atc", u, dof, chi, pred),)
    elif estimand is Estimand.ATE:
        w0, w1 = _require_pair(weights, "weights")
        g0, g1 = _as_pair(design)
        fit0, fit1 = _require_pair(fits, "fits")
        u0 = imbalance(w0, g0, treatment, Estimand.ATE, side=0)
        u1 = imbalance(w1, g1, treatment, Estimand.ATE, side=1)
        dof0, chi0, pred0 = _side_terms(u0, fit0, q)
        dof1, chi1, pred1 = _side_terms(u1, fit1, q)
        sides = (
            TfiSide("ate_control", u0, dof0, chi0, pred0),
            TfiSide("ate_treated", u1, dof1, chi1, pred1),
        )
    else:
        raise DataError(f"unknown estimand {estimand!r}")
    return TfiReport(q=q, estimand=estimand, sides=sides)


def ewc_bias_estimate(
    weights,
    design,
    treatment: np.ndarray,
    fits,
    estimand: Estimand = Estimand.ATT,
) -> float:
    """Estimated bias from leftover imbalance in the fitted outcome function.

    Signed imbalance of the fitted values: for the ATT this is
    ``imbal(w, fhat0(X), D)``, i.e. the design imbalance vector dotted
    with the control-fit coefficients (plus the intercept's imbalance,
    which vanishes for mean-one weights).  The augmented estimator
    subtracts exactly this quantity.

    ``design`` is the model design (feature-mapped), exactly as passed
    to :func:`tfi`; fitted values are ``design @ coefficients +
    intercept``.
    """
    if estimand is Estimand.ATT:
        fitted = _fitted_values(fits, design)
        return float(imbalance(weights, fitted, treatment, Estimand.ATT)[0])
    if estimand is Estimand.ATC:
        fitted = _fitted_values(fits, design)
        return float(imbalance(weights, fitted, treatment, Estimand.ATC)[0])
    if estimand is Estimand.ATE:
        w0, w1 = _require_pair(weights, "weights")
        g0, g1 = _as_pair(design)
        fit0, fit1 = _require_pair(fits, "fits")
        f0 = _fitted_values(fit0, g0)
        f1 = _fitted_values(fit1, g1)
        u0 = imbalance(w0, f0, treatment, Estimand.ATE, side=0)
        u1 = imbalance(w1, f1, treatment, Estimand.ATE, side=1)
        return float(u0[0] - u1[0])
    raise DataError(f"unknown estimand {estimand!r}")


def _fitted_values(fit, design) -> np.ndarray:
    """Fitted outcome values for model-design rows (no feature mapping)."""
    g = np.asarray(design, dtype=float)
    if g.ndim == 1:
        g = g[:, None]
    beta = np.asarray(fit.coefficients, dtype=float)
    if g.shape[1] != beta.shape[0]:
        raise DataError(
            f"fit dimension {beta.shape[0]} does not match design columns "
            f"{g.shape[1]}"
        )
    return g @ beta + fit.intercept
