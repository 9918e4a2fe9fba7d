"""Comparison weighting methods: entropy balancing, a stable balancing
quadratic program, oracle propensity weights, and the unweighted
difference in means.

All weighting baselines here target the ATT: weights sit on the control
group, are nonnegative, and sum to the number of controls (mean one).
"""

from __future__ import annotations

import numpy as np

from .dataset import Estimand
from .errors import DataError, InfeasibleError

__all__ = [
    "dim",
    "entropy_balancing",
    "stable_balancing",
    "oracle_propensity_weights",
]


def dim(y: np.ndarray, treatment: np.ndarray) -> float:
    """Unweighted difference in group means (treated minus control)."""
    y = np.asarray(y, dtype=float)
    d = np.asarray(treatment)
    yc = y[d == 0]
    yt = y[d == 1]
    if yc.size == 0 or yt.size == 0:
        raise DataError("need at least one control and one treated unit")
    return float(yt.mean() - yc.mean())


def _att_blocks(design: np.ndarray, treatment: np.ndarray):
    g = np.asarray(design, dtype=float)
    if g.ndim == 1:
        g = g[:, None]
    d = np.asarray(treatment)
    if g.shape[0] != d.shape[0]:
        raise DataError(
            f"design has {g.shape[0]} rows for {d.shape[0]} treatment values"
        )
    g_c = g[d == 0]
    g_t = g[d == 1]
    if g_c.shape[0] == 0 or g_t.shape[0] == 0:
        raise DataError("need at least one control and one treated unit")
    return g_c, g_t


def entropy_balancing(
    design: np.ndarray,
    treatment: np.ndarray,
    tol: float = 1e-8,
    max_iter: int = 500,
) -> np.ndarray:
    """Entropy-balancing weights on controls: exact mean balance.

    Minimizes ``sum w_i log w_i`` over nonnegative control weights that
    sum to ``n_c`` and equalize weighted control means with treated means
    in every design column.  Solved through the dual (a log-sum-exp
    program) by damped Newton iteration; at return the infinity norm of
    the leftover imbalance is below ``tol``.

    Raises
    ------
    InfeasibleError
        If the dual diverges, i.e. the treated means are not in the
        convex hull of the control rows.
    """
    g_c, g_t = _att_blocks(design, treatment)
    target = g_t.mean(axis=0)
    z = g_c - target  # balance holds when the softmax-weighted mean of z is 0
    n_c, p = z.shape

    theta = np.zeros(p)

    def dual(th):
        logits = z @ th
        shift = logits.max()
        return shift + np.log(np.sum(np.exp(logits - shift))), logits

    val, logits = dual(theta)
    for _ in range(max_iter):
        w_soft = np.exp(logits - logits.max())
        w_soft /= w_soft.sum()
        grad = w_soft @ z
        if np.abs(grad).max() < tol:
            return n_c * w_soft
        centered = z - grad
        hess = (w_soft[:, None] * centered).T @ centered
        ridge = 1e-12 * max(1.0, float(np.trace(hess)))
        try:
            step = np.linalg.solve(hess + ridge * np.eye(p), -grad)
        except np.linalg.LinAlgError:
            step = -grad
        # Backtracking (Armijo) on the dual value; grad@step < 0 for a
        # descent direction, so this demands an actual decrease.
        slope = float(grad @ step)
        scale = 1.0
        for _ in range(60):
            cand = theta + scale * step
            cand_val, cand_logits = dual(cand)
            if cand_val <= val + 1e-4 * scale * slope or cand_val < val:
                break
            scale *= 0.5
        else:
            raise InfeasibleError(
                "entropy balancing dual stalled; target means appear to lie "
                "outside the convex hull of the control rows"
            )
        theta, val, logits = cand, cand_val, cand_logits
    raise InfeasibleError(
        "entropy balancing did not converge; the balance constraints appear "
        "infeasible"
    )


def stable_balancing(
    design: np.ndarray,
    treatment: np.ndarray,
    delta: float | np.ndarray | None = None,
    tol: float = 1e-6,
    max_outer: int = 60,
) -> np.ndarray:
    """Minimum-variance weights under box constraints on imbalance.

    Minimizes ``||w||^2`` over nonnegative control weights summing to
    ``n_c`` subject to ``|imbal_j(w)| <= delta_j`` for every design
    column.  ``delta`` defaults to 0.1 times each column's pooled sample
    standard deviation.  Solved by an augmented Lagrangian over the box
    constraints with inner projected-gradient steps on the scaled
    simplex; the KKT residual (constraint violation and projected
    stationarity) is below ``tol`` at return.

    Raises
    ------
    InfeasibleError
        If the violation cannot be driven to ``tol`` as the penalty grows.
    """
    from .tfb_solver import project_scaled_simplex

    g = np.asarray(design, dtype=float)
    if g.ndim == 1:
        g = g[:, None]
    g_c, g_t = _att_blocks(g, treatment)
    target = g_t.mean(axis=0)
    n_c, p = g_c.shape

    if delta is None:
        delta_vec = 0.1 * np.std(g, axis=0, ddof=1)
    else:
        delta_vec = np.broadcast_to(np.asarray(delta, dtype=float), (p,)).copy()
    if np.any(~np.isfinite(delta_vec)) or np.any(delta_vec < 0):
        raise DataError("delta must be finite and nonnegative")

    w = np.ones(n_c)
    lam_hi = np.zeros(p)
    lam_lo = np.zeros(p)
    mu = 1.0
    prev_viol = np.inf

    def imbal(wv):
        return target - g_c.T @ wv / n_c

    # Largest eigenvalue of g_c g_c^T by power iteration; the trace bound
    # is far too conservative on wide correlated designs and starves the
    # inner steps once the penalty grows.
    v = np.ones(p) / np.sqrt(p)
    lam_max = float(np.sum(g_c**2))
    for _ in range(30):
        v_new = g_c.T @ (g_c @ v)
        norm = float(np.linalg.norm(v_new))
        if norm == 0.0:
            lam_max = 0.0
            break
        lam_max = norm
        v = v_new / norm

    for _ in range(max_outer):
        # Inner minimization of the augmented Lagrangian: projected
        # gradient on the scaled simplex with momentum and a restart on
        # overshoot, so large penalties stay tractable.
        step = 1.0 / (2.0 + mu * lam_max / n_c**2)

        def al_grad(wv):
            u = imbal(wv)
            y_hi = np.maximum(0.0, lam_hi + mu * (u - delta_vec))
            y_lo = np.maximum(0.0, lam_lo + mu * (-u - delta_vec))
            return 2.0 * wv + (-1.0 / n_c) * (g_c @ (y_hi - y_lo))

        y_acc = w.copy()
        t_mom = 1.0
        for _ in range(3000):
            cand = project_scaled_simplex(y_acc - step * al_grad(y_acc), float(n_c))
            if float((cand - y_acc) @ (y_acc - w)) > 0.0:
                # Momentum points uphill; restart from the last iterate.
                y_acc = w.copy()
                t_mom = 1.0
                cand = project_scaled_simplex(y_acc - step * al_grad(y_acc), float(n_c))
            t_new = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t_mom * t_mom))
            y_acc = cand + ((t_mom - 1.0) / t_new) * (cand - w)
            move = float(np.abs(cand - w).max())
            w = cand
            t_mom = t_new
            if move < 1e-11 * (1.0 + float(np.abs(w).max())):
                break
        u = imbal(w)
        viol = float(np.maximum(np.abs(u) - delta_vec, 0.0).max())
        lam_hi = np.maximum(0.0, lam_hi + mu * (u - delta_vec))
        lam_lo = np.maximum(0.0, lam_lo + mu * (-u - delta_vec))
        if viol <= tol:
            # Polish stationarity: one more inner pass at the final
            # multipliers, then check the projected-gradient residual.
            grad = 2.0 * w + (-1.0 / n_c) * (g_c @ (lam_hi - lam_lo))
            resid = w - project_scaled_simplex(w - grad, float(n_c))
            if float(np.abs(resid).max()) <= tol * (1.0 + float(np.abs(w).max())):
                return w
        if viol > 0.5 * prev_viol:
            mu *= 2.0
        prev_viol = viol if np.isfinite(viol) else prev_viol
        if mu > 1e12:
            raise InfeasibleError(
                f"stable balancing penalty diverged (violation {viol:.2e}); "
                "the imbalance box appears infeasible"
            )
    raise InfeasibleError(
        "stable balancing did not reach the requested KKT tolerance"
    )


def oracle_propensity_weights(
    propensity: np.ndarray,
    treatment: np.ndarray,
    estimand: Estimand = Estimand.ATT,
    normalize: bool = True,
):
    """Weights from known treatment probabilities.

    For the ATT each control unit gets ``(n_c/n_t) * pi/(1 - pi)``; the
    normalized variant rescales the weights to sum to ``n_c``.  The ATC
    mirrors this on treated units and the ATE returns a (control,
    treated) pair targeting the full-sample distribution.

    Raises
    ------
    DataError
        If a weighted unit has propensity at 0 or 1.
    """
    pi = np.asarray(propensity, dtype=float)
    d = np.asarray(treatment)
    if pi.shape != d.shape:
        raise DataError(f"propensity shape {pi.shape} does not match treatment")
    if np.any(~np.isfinite(pi)) or np.any(pi < 0) or np.any(pi > 1):
        raise DataError("propensities must lie in [0, 1]")
    control = d == 0
    treated = d == 1
    n_c = int(control.sum())
    n_t = int(treated.sum())
    if n_c == 0 or n_t == 0:
        raise DataError("need at least one control and one treated unit")

    def _scaled(raw, total):
        if normalize:
            s = raw.sum()
            if s <= 0:
                raise DataError("propensity weights sum to zero; cannot normalize")
            return total * raw / s
        return raw

    if estimand is Estimand.ATT:
        pc = pi[control]
        if np.any(pc >= 1.0):
            raise DataError("control unit with propensity 1 has infinite weight")
        raw = (n_c / n_t) * pc / (1.0 - pc)
        return _scaled(raw, n_c)
    if estimand is Estimand.ATC:
        pt = pi[treated]
        if np.any(pt <= 0.0):
            raise DataError("treated unit with propensity 0 has infinite weight")
        raw = (n_t / n_c) * (1.0 - pt) / pt
        return _scaled(raw, n_t)
    if estimand is Estimand.ATE:
        pc = pi[control]
        pt = pi[treated]
        if np.any(pc >= 1.0) or np.any(pt <= 0.0):
            raise DataError("weighted unit with degenerate propensity")
        n = n_c + n_t
        raw0 = (n_c / n) / (1.0 - pc)
        raw1 = (n_t / n) / pt
        return _scaled(raw0, n_c), _scaled(raw1, n_t)
    raise DataError(f"unknown estimand {estimand!r}")
