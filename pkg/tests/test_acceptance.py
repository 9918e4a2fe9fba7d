"""End-to-end acceptance gates.

Each test prints exactly one [PASS]/[FAIL] line with the measured
quantities and its runtime (written past pytest's capture so the lines
always appear), then asserts the gate.  Oracles here never share a code
path with the implementation: grid enumeration, scipy's incomplete
gamma, bisection on erf, and hand-rolled formulas.
"""

import math
import time

import numpy as np
import pytest
import scipy.special

import tfb
from tfb import Estimand, KernelSpec
from tfb.outcome_models import CvConfig, LinearMap, OutcomeModelFit

import _grid_oracle as oracle


def _report(capsys, name, ok, detail):
    tag = "PASS" if ok else "FAIL"
    with capsys.disabled():
        print(f"\n[{tag}] {name}: {detail}", flush=True)


def _linear_fit(beta, cov, sigma2):
    beta = np.atleast_1d(np.asarray(beta, dtype=float))
    return OutcomeModelFit(
        backend="ols",
        coefficients=beta,
        intercept=0.0,
        coef_covariance=np.atleast_2d(np.asarray(cov, dtype=float)),
        residual_variance=float(sigma2),
        feature_map=LinearMap(n_inputs=beta.size, add_intercept=False),
        n_fit=10,
    )


# ----------------------------------------------------------------------
# 1. solver vs grid oracle
# ----------------------------------------------------------------------


def test_criterion_1_solver_grid_oracle(capsys):
    start = time.perf_counter()
    rng = np.random.default_rng(20260825)
    cases = [(n_c, p) for n_c in (2, 3, 4) for p in (1, 2)]
    worst = -np.inf
    for k in range(25):
        n_c, p = cases[k % len(cases)]
        design = rng.normal(size=(n_c + 3, p))
        d = np.r_[np.zeros(n_c), np.ones(3)].astype(int)
        a = rng.normal(size=(p, p))
        fit = _linear_fit(
            rng.normal(size=p), 0.5 * (a @ a.T), float(rng.uniform(0.1, 2.0))
        )
        problem = tfb.build_problem(design, d, fit, 0.95)
        sol = tfb.solve(problem)
        ing = oracle.att_ingredients(design, d, fit, 0.95)
        exact = float(oracle.objective_batch(sol.weights[None, :], *ing)[0])
        if n_c in (2, 3):
            grid_min = oracle.grid_min_att(design, d, fit, 0.95, step=1e-3)
        else:
            grid_min = oracle.refined_min_att(design, d, fit, 0.95, final_step=1e-3)
        worst = max(worst, (exact - grid_min) / max(abs(grid_min), 1e-12))
    elapsed = time.perf_counter() - start
    ok = worst < 1e-4 and elapsed < 60.0
    _report(
        capsys,
        "criterion 1 (solver vs 1e-3 grid oracle, 25 instances)",
        ok,
        f"max relative gap {worst:.3e} (gate 1e-4), runtime {elapsed:.1f}s (gate 60s)",
    )
    assert worst < 1e-4
    assert elapsed < 60.0


# ----------------------------------------------------------------------
# 2. second design: bias/RMSE quality gates
# ----------------------------------------------------------------------


def test_criterion_2_dgp2_estimation_quality(capsys):
    start = time.perf_counter()
    report = tfb.run_monte_carlo(
        "dgp2",
        1000,
        200,
        methods=("dim", "abal1", "tfb_lasso"),
        base_seed=0,
        delta=0.3,
    )
    elapsed = time.perf_counter() - start
    m_dim = report.methods["dim"]
    m_abal = report.methods["abal1"]
    m_tfb = report.methods["tfb_lasso"]
    bias_ratio = abs(m_tfb.bias) / abs(m_dim.bias)
    rmse_ratio = m_tfb.rmse / m_abal.rmse
    ok = (
        bias_ratio <= 0.25
        and rmse_ratio <= 0.6
        and m_tfb.failures == 0
        and elapsed < 1800.0
    )
    _report(
        capsys,
        "criterion 2 (dgp2 M=200 n=1000 quality)",
        ok,
        f"|bias| ratio vs dim {bias_ratio:.3f} (gate 0.25), "
        f"rmse ratio vs abal1 {rmse_ratio:.3f} (gate 0.60), "
        f"biases dim {m_dim.bias:+.3f} / abal1 {m_abal.bias:+.3f} / "
        f"tfb_lasso {m_tfb.bias:+.3f}, rmses {m_dim.rmse:.3f} / "
        f"{m_abal.rmse:.3f} / {m_tfb.rmse:.3f}, abal1 failures "
        f"{m_abal.failures}, runtime {elapsed:.0f}s (gate 1800s)",
    )
    assert m_tfb.failures == 0
    assert bias_ratio <= 0.25
    assert rmse_ratio <= 0.6
    assert elapsed < 1800.0


# ----------------------------------------------------------------------
# 3. first design: offsetting-imbalance signature
# ----------------------------------------------------------------------


def test_criterion_3_dgp1_offsetting_imbalance(capsys):
    start = time.perf_counter()
    report = tfb.run_monte_carlo(
        "dgp1", 1000, 200, methods=("tfb_krls",), base_seed=0
    )
    elapsed = time.perf_counter() - start
    init = report.initial_imbalance
    left = report.methods["tfb_krls"].leftover_imbalance
    sign_flip = (
        init["z1"] != 0.0
        and left["z1"] != 0.0
        and np.sign(left["z1"]) == -np.sign(init["z1"])
    )
    ratios = {name: abs(left[name]) / abs(init[name]) for name in ("z1", "z2", "z3", "z4")}
    shrunk = all(r <= 0.5 for r in ratios.values())
    ok = sign_flip and shrunk and elapsed < 2700.0
    detail_ratios = ", ".join(f"{k} {v:.3f}" for k, v in ratios.items())
    _report(
        capsys,
        "criterion 3 (dgp1 M=200 n=1000 leftover imbalance)",
        ok,
        f"initial z1 {init['z1']:+.4f} vs leftover z1 {left['z1']:+.5f} "
        f"(sign flip {sign_flip}), |leftover|/|initial| {detail_ratios} "
        f"(gate 0.5 each), runtime {elapsed:.0f}s (gate 2700s)",
    )
    assert sign_flip
    assert shrunk
    assert elapsed < 2700.0


# ----------------------------------------------------------------------
# 4. coverage of the 95% interval
# ----------------------------------------------------------------------


def test_criterion_4_dgp2_coverage(capsys):
    start = time.perf_counter()
    report = tfb.run_monte_carlo(
        "dgp2", 1000, 300, methods=("tfb_lasso",), base_seed=1000
    )
    elapsed = time.perf_counter() - start
    m = report.methods["tfb_lasso"]
    coverage = m.coverage
    ok = (
        m.failures == 0
        and coverage is not None
        and 0.90 <= coverage <= 0.99
        and elapsed < 1800.0
    )
    _report(
        capsys,
        "criterion 4 (dgp2 M=300 single-split coverage)",
        ok,
        f"coverage {coverage:.3f} (gate [0.90, 0.99]), failures {m.failures}, "
        f"runtime {elapsed:.0f}s (gate 1800s)",
    )
    assert m.failures == 0
    assert 0.90 <= coverage <= 0.99
    assert elapsed < 1800.0


# ----------------------------------------------------------------------
# 5. generator calibration
# ----------------------------------------------------------------------


def test_criterion_5_dgp_calibration(capsys):
    start = time.perf_counter()
    one = tfb.draw_dgp1(100_000, seed=12345)
    two = tfb.draw_dgp2(100_000, seed=999)
    r2_one = float(np.var(one.f0) / np.var(one.dataset.y))
    r2_two = float(np.var(two.f0) / np.var(two.dataset.y))
    share_one = one.dataset.n_treated / one.dataset.n
    elapsed = time.perf_counter() - start
    ok = (
        abs(r2_one - 0.60) <= 0.02
        and abs(r2_two - 0.50) <= 0.02
        and abs(share_one - 0.50) <= 0.01
    )
    _report(
        capsys,
        "criterion 5 (design calibration at 1e5 draws)",
        ok,
        f"dgp1 R^2 {r2_one:.4f} (gate 0.60 +/- 0.02), dgp2 R^2 {r2_two:.4f} "
        f"(gate 0.50 +/- 0.02), dgp1 treated share {share_one:.4f} "
        f"(gate 0.50 +/- 0.01), runtime {elapsed:.1f}s",
    )
    assert abs(r2_one - 0.60) <= 0.02
    assert abs(r2_two - 0.50) <= 0.02
    assert abs(share_one - 0.50) <= 0.01


# ----------------------------------------------------------------------
# 6. decomposition identity
# ----------------------------------------------------------------------


def test_criterion_6_decomposition_identity(capsys):
    start = time.perf_counter()
    rng = np.random.default_rng(606)
    worst = 0.0
    for _ in range(100):
        n_c = int(rng.integers(20, 81))
        n_t = int(rng.integers(10, 51))
        p = int(rng.integers(1, 5))
        x = rng.normal(size=(n_c + n_t, p))
        d = np.r_[np.zeros(n_c), np.ones(n_t)].astype(int)
        coef = rng.normal(size=p)
        f0 = x @ coef + 0.5 * np.sin(x[:, 0])
        eps = rng.normal(scale=rng.uniform(0.5, 2.0), size=n_c + n_t)
        tau = rng.normal(loc=1.0, size=n_c + n_t)
        y = f0 + eps + d * tau
        satt = float(tau[d == 1].mean())
        w = rng.uniform(0.05, 3.0, size=n_c)
        w *= n_c / w.sum()
        point = tfb.wdim(y, d, w, Estimand.ATT)
        bias_f0 = float(f0[d == 1].mean() - w @ f0[d == 0] / n_c)
        eps_terms = float(eps[d == 1].mean() - w @ eps[d == 0] / n_c)
        worst = max(worst, abs((point - satt) - (bias_f0 + eps_terms)))
    elapsed = time.perf_counter() - start
    ok = worst < 1e-10
    _report(
        capsys,
        "criterion 6 (decomposition identity, 100 instances)",
        ok,
        f"max |gap - (f0 imbalance + noise terms)| = {worst:.3e} (gate 1e-10), "
        f"runtime {elapsed:.1f}s",
    )
    assert worst < 1e-10


# ----------------------------------------------------------------------
# 7. augmented vs weighted agreement
# ----------------------------------------------------------------------


def test_criterion_7_augmented_agreement(capsys):
    start = time.perf_counter()
    runs = (
        ("dgp1", "tfb_ols", 25),
        ("dgp2", "tfb_lasso", 25),
    )
    details = []
    ok = True
    for dgp, method, reps in runs:
        report = tfb.run_monte_carlo(dgp, 500, reps, methods=(method,), base_seed=0)
        m = report.methods[method]
        rows = [r for r in tfb.per_replicate_rows(report) if not r["failed"]]
        diff = max(abs(r["augmented"] - r["estimate"]) for r in rows)
        bound = 0.05 * m.rmse
        ok = ok and m.failures == 0 and diff <= bound
        details.append(
            f"{dgp}/{method} max |aug - wdim| {diff:.2e} vs 0.05*rmse {bound:.2e}"
        )
    elapsed = time.perf_counter() - start
    _report(
        capsys,
        "criterion 7 (augmented/weighted agreement, 50 solves n=500)",
        ok,
        "; ".join(details) + f", runtime {elapsed:.0f}s",
    )
    assert ok


# ----------------------------------------------------------------------
# 8. quantile functions vs independent oracles
# ----------------------------------------------------------------------


def test_criterion_8_quantile_functions(capsys):
    start = time.perf_counter()
    qs = (0.005, 0.025, 0.05, 0.25, 0.5, 0.75, 0.9, 0.95, 0.99, 0.999)
    dofs = (
        1, 2, 3, 4, 5, 6, 8, 10, 15, 20,
        30, 50, 75, 100, 200, 500, 1000, 10_000, 50_000, 100_000,
    )
    worst_chi = 0.0
    for q in qs:
        for dof in dofs:
            x = tfb.chi_sq_quantile(q, dof)
            resid = abs(float(scipy.special.gammainc(dof / 2.0, x / 2.0)) - q)
            worst_chi = max(worst_chi, resid)

    def normal_cdf(x):
        return 0.5 * (1.0 + math.erf(x / math.sqrt(2.0)))

    def bisect_quantile(prob):
        lo, hi = -10.0, 10.0
        for _ in range(200):
            mid = 0.5 * (lo + hi)
            if normal_cdf(mid) < prob:
                lo = mid
            else:
                hi = mid
        return 0.5 * (lo + hi)

    worst_norm = 0.0
    for prob in np.linspace(0.001, 0.999, 51):
        worst_norm = max(
            worst_norm, abs(tfb.normal_quantile(float(prob)) - bisect_quantile(prob))
        )
    elapsed = time.perf_counter() - start
    ok = worst_chi < 1e-10 and worst_norm < 1e-9
    _report(
        capsys,
        "criterion 8 (quantile oracles, 200-point lattice)",
        ok,
        f"max chi-square CDF residual {worst_chi:.3e} (gate 1e-10), "
        f"max normal quantile error {worst_norm:.3e} (gate 1e-9), "
        f"runtime {elapsed:.1f}s",
    )
    assert worst_chi < 1e-10
    assert worst_norm < 1e-9


# ----------------------------------------------------------------------
# 9. invariant bundle
# ----------------------------------------------------------------------


def test_criterion_9_invariant_suites(capsys):
    start = time.perf_counter()
    rng = np.random.default_rng(909)
    checks = {}

    # simplex feasibility: projections land on {w >= 0, sum w = s}
    feasible = True
    for _ in range(40):
        dim_w = int(rng.integers(1, 13))
        scale = float(rng.uniform(0.5, 8.0))
        w = tfb.project_scaled_simplex(rng.normal(scale=3.0, size=dim_w), scale)
        feasible = feasible and bool(np.all(w >= 0.0))
        feasible = feasible and abs(float(w.sum()) - scale) <= 1e-9 * max(scale, 1.0)
    checks["simplex feasibility"] = feasible

    # TFI convexity probe along random segments
    design = rng.normal(size=(12, 2))
    d = np.r_[np.zeros(8), np.ones(4)].astype(int)
    a = rng.normal(size=(2, 2))
    fit = _linear_fit(rng.normal(size=2), 0.5 * (a @ a.T), 1.0)
    convex = True
    for _ in range(20):
        w1 = tfb.project_scaled_simplex(rng.normal(size=8), 8.0)
        w2 = tfb.project_scaled_simplex(rng.normal(size=8), 8.0)
        lam = float(rng.uniform(0.0, 1.0))
        mid = tfb.tfi(lam * w1 + (1 - lam) * w2, design, d, fit, 0.95, Estimand.ATT)
        ends = lam * tfb.tfi(w1, design, d, fit, 0.95, Estimand.ATT).total + (
            1 - lam
        ) * tfb.tfi(w2, design, d, fit, 0.95, Estimand.ATT).total
        convex = convex and mid.total <= ends + 1e-10
    checks["tfi convexity"] = convex

    # gram symmetry and positive semidefiniteness
    x = rng.normal(size=(30, 3))
    k = tfb.gram_square(x, KernelSpec(bandwidth=3.0))
    eigs = np.linalg.eigvalsh(k)
    checks["gram psd/symmetry"] = bool(
        np.array_equal(k, k.T) and eigs.min() >= -1e-10
    )

    # entropy balancing achieves exact balance
    x_c = rng.normal(size=(40, 3))
    x_t = rng.normal(loc=0.25, size=(20, 3))
    xb = np.r_[x_c, x_t]
    db = np.r_[np.zeros(40), np.ones(20)].astype(int)
    w_eb = tfb.entropy_balancing(xb, db)
    imb = tfb.imbalance(w_eb, xb, db, Estimand.ATT)
    checks["entropy balancing exact balance"] = bool(np.abs(imb).max() < 1e-8)

    # lasso stationarity at the solved penalty
    base = rng.normal(size=(80, 3))
    xl = np.c_[base, base + 0.5 * rng.normal(size=(80, 3))]
    yl = 2.0 * xl[:, 0] - xl[:, 3] + rng.normal(size=80)
    fit_l = tfb.fit_lasso_bootstrap(
        xl,
        yl,
        CvConfig(lambda_grid=np.array([0.01, 0.05, 0.1]), folds=5, seed=0),
        bootstrap_reps=20,
        seed=0,
        tol=1e-12,
    )
    lam = fit_l.diagnostics["lambda"]
    sd = xl.std(axis=0, ddof=1)
    xs = (xl - xl.mean(axis=0)) / sd
    yc = yl - yl.mean()
    beta_std = fit_l.coefficients * sd
    grad = xs.T @ (yc - xs @ beta_std) / xl.shape[0]
    kkt = True
    for j in range(xl.shape[1]):
        if abs(beta_std[j]) > 1e-10:
            kkt = kkt and abs(grad[j] - lam * np.sign(beta_std[j])) <= 1e-6
        else:
            kkt = kkt and abs(grad[j]) <= lam + 1e-6
    checks["lasso stationarity"] = kkt

    # least squares normal equations
    xo = rng.normal(size=(50, 4))
    yo = xo @ rng.normal(size=4) + rng.normal(size=50)
    fit_o = tfb.fit_ols_sandwich(xo, yo)
    resid = yo - tfb.predict(fit_o, xo)
    xo_aug = np.c_[np.ones(50), xo]
    checks["ols normal equations"] = bool(
        np.abs(xo_aug.T @ resid).max() < 1e-8
    )

    elapsed = time.perf_counter() - start
    ok = all(checks.values())
    detail = ", ".join(f"{name} {'ok' if good else 'BROKEN'}" for name, good in checks.items())
    _report(
        capsys,
        "criterion 9 (invariant suites)",
        ok,
        detail + f", runtime {elapsed:.1f}s",
    )
    assert ok, checks
