"""Synthetic data-generating processes and the Monte Carlo harness.

Two designs are provided.  ``dgp1`` scatters units around four cluster
centers, makes treatment more likely near a unit's own center, and
builds the outcome from inverse distances to every center, so the
covariates enter the outcome through a nonlinear transform.  ``dgp2``
is linear in four latent variables but pads the covariate set with
five distractor columns (shifted by treatment, irrelevant to the
outcome) and ten extraneous noise columns.

``run_monte_carlo`` benchmarks weighting estimators on either design
and reports bias, RMSE, relative effective sample size, leftover
imbalance in the latent variables, and confidence-interval coverage.
Every replicate is a pure function of ``(dgp, n, base_seed + m)``: all
randomness flows through a counter-based generator (Philox) and normal
variates come from an explicit Box-Muller transform on that stream, so
identical inputs give bitwise-identical reports on any platform.
"""

from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import balance_metrics as bm
from .baselines import (
    dim,
    entropy_balancing,
    oracle_propensity_weights,
    stable_balancing,
)
from .dataset import Dataset, Estimand, expand_features, standardize_covariates, validate
from .effect_estimators import (
    EstimatorConfig,
    confidence_interval,
    cross_fit_estimate,
    wdim,
)
from .errors import DataError, NumericalError

DGP1_CENTERS = np.array([[0.0, 0.0], [0.0, 5.0], [5.0, 0.0], [5.0, 5.0]])
DGP1_CENTERING = 0.47
DGP1_NOISE_VARIANCE = 1.5
DGP1_OUTCOME_COEF = np.array([10.0, 1.0, 1.0, 1.0])

DGP2_OUTCOME_COEF = np.array([8.0, 4.0, 2.0, 1.0])
DGP2_NOISE_SD = 9.21
DGP2_LOGODDS_COEF = 0.2
DGP2_N_DISTRACTORS = 5
DGP2_N_EXTRANEOUS = 10

SUPPORTED_METHODS = (
    "dim",
    "ebal",
    "abal1",
    "oracle_ps",
    "tfb_ols",
    "tfb_krls",
    "tfb_lasso",
)
TFB_METHODS = ("tfb_ols", "tfb_krls", "tfb_lasso")

# Stream label mixed into the replicate seed so the sample-split keys
# never reuse the uniforms that generated the data themselves.
_SPLIT_STREAM = 0x5B


def normal_draws(rng: np.random.Generator, shape) -> np.ndarray:
    """Standard normal variates via Box-Muller on ``rng``'s uniforms.

    Uses ``1 - U`` for the radial uniform so the logarithm never sees
    zero.  Consumes ``2 * ceil(count / 2)`` uniforms.
    """
    if isinstance(shape, (int, np.integer)):
        shape = (int(shape),)
    else:
        shape = tuple(int(s) for s in shape)
    count = 1
    for s in shape:
        count *= s
    pairs = (count + 1) // 2
    u1 = 1.0 - rng.random(pairs)
    u2 = rng.random(pairs)
    radius = np.sqrt(-2.0 * np.log(u1))
    angle = 2.0 * np.pi * u2
    z = np.concatenate([radius * np.cos(angle), radius * np.sin(angle)])
    return z[:count].reshape(shape)


def radial_features(x) -> np.ndarray:
    """Inverse distance-plus-one from each row of ``x`` to the four
    cluster centers: ``z[i, l] = 1 / (||x_i - c_l|| + 1)``."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    if x.shape[1] != 2:
        raise DataError(f"expected 2-column locations, got shape {x.shape}")
    diff = x[:, None, :] - DGP1_CENTERS[None, :, :]
    dists = np.sqrt(np.sum(diff * diff, axis=2))
    return 1.0 / (dists + 1.0)


@dataclass(frozen=True)
class DgpDraw:
    """One simulated sample plus the ground truth that produced it.

    All arrays are aligned to the dataset's internal (control-first)
    row order.  ``latent`` holds the tracked latent columns used for
    leftover-imbalance tables; ``cluster`` is None for dgp2.
    """

    dataset: Dataset
    f0: np.ndarray
    f1: np.ndarray
    propensity: np.ndarray
    latent: np.ndarray
    latent_names: tuple[str, ...]
    cluster: np.ndarray | None
    att: float
    dgp: str


def _sigmoid(t: np.ndarray) -> np.ndarray:
    out = np.empty_like(t)
    pos = t >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-t[pos]))
    et = np.exp(t[~pos])
    out[~pos] = et / (1.0 + et)
    return out


def draw_dgp1(n: int, seed: int) -> DgpDraw:
    """Four-cluster geography draw.

    Stream order (frozen): cluster uniforms, location normals,
    assignment uniforms, outcome noise normals.  Cluster centers sit at
    the corners of a 5 x 5 square; locations are bivariate normal with
    identity covariance around the unit's center.  Treatment log-odds
    are ``4 (Z1 - 0.47)`` in the first cluster and ``20 (Z_own - 0.47)``
    elsewhere; the outcome is ``10 Z1 + Z2 + Z3 + Z4`` plus noise with
    variance 1.5.  The true treatment effect is zero everywhere.
    """
    if n < 8:
        raise DataError(f"dgp1 needs n >= 8, got {n}")
    rng = np.random.Generator(np.random.Philox(seed))
    cluster = np.minimum(np.floor(4.0 * rng.random(n)).astype(np.int64), 3)
    x = DGP1_CENTERS[cluster] + normal_draws(rng, (n, 2))
    z = radial_features(x)
    own = z[np.arange(n), cluster]
    slope = np.where(cluster == 0, 4.0, 20.0)
    propensity = _sigmoid(slope * (own - DGP1_CENTERING))
    d = (rng.random(n) < propensity).astype(np.int64)
    f0 = z @ DGP1_OUTCOME_COEF
    y = f0 + np.sqrt(DGP1_NOISE_VARIANCE) * normal_draws(rng, n)
    ds = validate(y, d, x, columns=("x1", "x2"))
    o = ds.order
    return DgpDraw(
        dataset=ds,
        f0=f0[o],
        f1=f0[o],
        propensity=propensity[o],
        latent=z[o],
        latent_names=("z1", "z2", "z3", "z4"),
        cluster=cluster[o],
        att=0.0,
        dgp="dgp1",
    )


def draw_dgp2(n: int, seed: int) -> DgpDraw:
    """Linear-in-latents draw with distractor and extraneous columns.

    Stream order (frozen): latent normals, assignment uniforms,
    distractor noise, extraneous noise, outcome noise.  The four
    latents are standard normal; treatment log-odds are their sum over
    five; the outcome is ``8 Z1 + 4 Z2 + 2 Z3 + Z4`` plus noise with
    standard deviation 9.21.  Distractors shift by one under treatment
    but never enter the outcome; the extraneous block is pure noise.
    The true treatment effect is zero everywhere.
    """
    if n < 8:
        raise DataError(f"dgp2 needs n >= 8, got {n}")
    rng = np.random.Generator(np.random.Philox(seed))
    z = normal_draws(rng, (n, 4))
    propensity = _sigmoid(DGP2_LOGODDS_COEF * z.sum(axis=1))
    d = (rng.random(n) < propensity).astype(np.int64)
    a = d[:, None] + normal_draws(rng, (n, DGP2_N_DISTRACTORS))
    u = normal_draws(rng, (n, DGP2_N_EXTRANEOUS))
    f0 = z @ DGP2_OUTCOME_COEF
    y = f0 + DGP2_NOISE_SD * normal_draws(rng, n)
    x = np.hstack([z, a, u])
    columns = (
        tuple(f"z{j+1}" for j in range(4))
        + tuple(f"a{j+1}" for j in range(DGP2_N_DISTRACTORS))
        + tuple(f"u{j+1}" for j in range(DGP2_N_EXTRANEOUS))
    )
    ds = validate(y, d, x, columns=columns)
    o = ds.order
    latent = np.hstack([z, a])[o]
    return DgpDraw(
        dataset=ds,
        f0=f0[o],
        f1=f0[o],
        propensity=propensity[o],
        latent=latent,
        latent_names=("z1", "z2", "z3", "z4", "a1", "a2", "a3", "a4", "a5"),
        cluster=None,
        att=0.0,
        dgp="dgp2",
    )


_DGP_DRAWS = {"dgp1": draw_dgp1, "dgp2": draw_dgp2}


def _dgp_key(dgp) -> str:
    text = str(dgp).strip().lower()
    if text in ("1", "2"):
        text = "dgp" + text
    if text not in _DGP_DRAWS:
        raise DataError(f"unknown dgp {dgp!r}; expected 1 or 2")
    return text


def _method_record(
    estimate=None,
    augmented=None,
    variance=None,
    ci=(None, None),
    covered=None,
    ress=None,
    leftover=None,
    fold_points=(None, None),
    failed=False,
    error=None,
):
    return {
        "failed": failed,
        "error": error,
        "estimate": estimate,
        "augmented": augmented,
        "variance": variance,
        "ci_low": ci[0],
        "ci_high": ci[1],
        "covered": covered,
        "ress": ress,
        "leftover": leftover,
        "fold_point_1": fold_points[0],
        "fold_point_2": fold_points[1],
    }


def _weighting_record(draw: DgpDraw, weights: np.ndarray):
    """Estimate, RESS, and latent leftover imbalance for full-sample
    control weights."""
    ds = draw.dataset
    est = wdim(ds.y, ds.d, weights, Estimand.ATT)
    leftover = bm.imbalance(weights, draw.latent, ds.d, Estimand.ATT)
    return _method_record(estimate=est, ress=bm.ress(weights), leftover=leftover)


def _tfb_record(draw: DgpDraw, ds_use: Dataset, config: EstimatorConfig, seed: int, gamma: float):
    split_seed = int(
        np.random.SeedSequence((seed, _SPLIT_STREAM)).generate_state(1, np.uint64)[0]
    )
    split = cross_fit_estimate(ds_use, config, split_seed)
    leftover = np.zeros(len(draw.latent_names))
    ress_sum = 0.0
    for fold in split.folds:
        rows = fold.estimate_rows
        leftover += bm.imbalance(
            fold.weights, draw.latent[rows], ds_use.d[rows], Estimand.ATT
        )
        ress_sum += bm.ress(fold.weights)
    leftover /= 2.0
    ci = confidence_interval(split.point, split.variance, gamma)
    return _method_record(
        estimate=split.point,
        augmented=split.augmented_point,
        variance=split.variance,
        ci=ci,
        covered=bool(ci[0] <= draw.att <= ci[1]),
        ress=0.5 * ress_sum,
        leftover=leftover,
        fold_points=(split.folds[0].point, split.folds[1].point),
    )


def run_replicate(
    dgp,
    n: int,
    seed: int,
    methods=SUPPORTED_METHODS,
    q: float = 0.95,
    gamma: float = 0.95,
    delta=None,
) -> dict:
    """Draw one sample and run every requested method on it.

    Returns a dict with the replicate seed, the unweighted latent
    imbalance, and one record per method.  Method failures are caught
    and recorded, never raised.
    """
    key = _dgp_key(dgp)
    draw = _DGP_DRAWS[key](n, seed)
    ds = draw.dataset
    ds_std, _ = standardize_covariates(ds)
    expanded = None
    if key == "dgp2":
        expanded, _ = standardize_covariates(expand_features(ds_std))
    wide = expanded if expanded is not None else ds_std

    initial = bm.imbalance(np.ones(ds.n_control), draw.latent, ds.d, Estimand.ATT)
    records: dict[str, dict] = {}
    for method in methods:
        try:
            if method == "dim":
                records[method] = _method_record(
                    estimate=dim(ds.y, ds.d), ress=1.0, leftover=initial.copy()
                )
            elif method == "ebal":
                w = entropy_balancing(ds_std.x, ds_std.d)
                records[method] = _weighting_record(draw, w)
            elif method == "abal1":
                w = stable_balancing(wide.x, wide.d, delta=delta)
                records[method] = _weighting_record(draw, w)
            elif method == "oracle_ps":
                w = oracle_propensity_weights(draw.propensity, ds.d, Estimand.ATT)
                records[method] = _weighting_record(draw, w)
            elif method == "tfb_ols":
                config = EstimatorConfig(backend="ols", q=q, gamma=gamma)
                records[method] = _tfb_record(draw, ds_std, config, seed, gamma)
            elif method == "tfb_krls":
                config = EstimatorConfig(backend="krls", q=q, gamma=gamma)
                records[method] = _tfb_record(draw, ds_std, config, seed, gamma)
            elif method == "tfb_lasso":
                config = EstimatorConfig(backend="lasso", q=q, gamma=gamma)
                records[method] = _tfb_record(draw, wide, config, seed, gamma)
            else:
                raise DataError(
                    f"unknown method {method!r}; supported: "
                    + ", ".join(SUPPORTED_METHODS)
                )
        except (DataError, NumericalError) as exc:
            records[method] = _method_record(
                failed=True, error=f"{type(exc).__name__}: {exc}"
            )
    return {"seed": seed, "initial": initial, "methods": records}


def _worker(args):
    return run_replicate(*args)


@dataclass(frozen=True)
class MethodMetrics:
    """Aggregated performance of one method over the replicates."""

    method: str
    successes: int
    failures: int
    bias: float | None
    rmse: float | None
    mean_estimate: float | None
    mean_ress: float | None
    coverage: float | None
    leftover_imbalance: dict[str, float]
    split_correlation: float | None
    failure_messages: tuple[str, ...]


@dataclass(frozen=True)
class MetricsReport:
    """Monte Carlo comparison of weighting estimators on one design."""

    dgp: str
    n: int
    replicates: int
    base_seed: int
    q: float
    gamma: float
    true_att: float
    latent_names: tuple[str, ...]
    initial_imbalance: dict[str, float]
    methods: dict[str, MethodMetrics]
    per_replicate: tuple[dict, ...]


def _with_summaries(names, values, dgp: str) -> dict[str, float]:
    table = {name: float(v) for name, v in zip(names, values)}
    rest = [table[k] for k in ("z2", "z3", "z4")]
    table["z_rest_mean"] = float(np.mean(rest))
    if dgp == "dgp2":
        distract = [table[f"a{j+1}"] for j in range(DGP2_N_DISTRACTORS)]
        table["distractor_mean"] = float(np.mean(distract))
    return table


def _resolve_workers(workers) -> int:
    if workers is None:
        env = os.environ.get("TFB_THREADS", "").strip()
        if env:
            try:
                workers = int(env)
            except ValueError:
                raise DataError(f"TFB_THREADS must be an integer, got {env!r}") from None
        else:
            workers = 1
    workers = int(workers)
    if workers < 1:
        raise DataError(f"worker count must be >= 1, got {workers}")
    return workers


def run_monte_carlo(
    dgp,
    n: int,
    replicates: int,
    methods=SUPPORTED_METHODS,
    base_seed: int = 0,
    q: float = 0.95,
    gamma: float = 0.95,
    delta=None,
    workers: int | None = None,
) -> MetricsReport:
    """Benchmark the requested methods over seeded replicates.

    Replicate ``m`` draws with seed ``base_seed + m``.  A method's
    failure on a replicate is tallied and that replicate is excluded
    from the method's aggregates.  ``workers`` > 1 distributes
    replicates across processes (default honours the TFB_THREADS
    environment variable); aggregation order is always replicate order,
    so the report is identical regardless of worker count.
    """
    key = _dgp_key(dgp)
    if replicates < 1:
        raise DataError(f"need at least 1 replicate, got {replicates}")
    methods = tuple(methods)
    if not methods:
        raise DataError("no methods requested")
    for method in methods:
        if method not in SUPPORTED_METHODS:
            raise DataError(
                f"unknown method {method!r}; supported: "
                + ", ".join(SUPPORTED_METHODS)
            )
    workers = _resolve_workers(workers)
    tasks = [
        (key, n, base_seed + m, methods, q, gamma, delta) for m in range(replicates)
    ]
    if workers == 1 or replicates == 1:
        results = [_worker(t) for t in tasks]
    else:
        with ProcessPoolExecutor(max_workers=min(workers, replicates)) as pool:
            results = list(pool.map(_worker, tasks))

    latent_names = _DGP_DRAWS[key](8, 0).latent_names
    initial_mean = np.mean([r["initial"] for r in results], axis=0)
    initial = _with_summaries(latent_names, initial_mean, key)

    per_replicate = []
    for m, result in enumerate(results):
        for method in methods:
            rec = result["methods"][method]
            row = {"replicate": m, "seed": result["seed"], "method": method}
            for field in (
                "failed",
                "error",
                "estimate",
                "augmented",
                "variance",
                "ci_low",
                "ci_high",
                "covered",
                "ress",
                "fold_point_1",
                "fold_point_2",
            ):
                row[field] = rec[field]
            for j, name in enumerate(latent_names):
                row[f"leftover_{name}"] = (
                    None if rec["leftover"] is None else float(rec["leftover"][j])
                )
            per_replicate.append(row)

    method_metrics: dict[str, MethodMetrics] = {}
    for method in methods:
        recs = [r["methods"][method] for r in results]
        good = [r for r in recs if not r["failed"]]
        failures = len(recs) - len(good)
        messages = []
        for r in recs:
            if r["failed"] and r["error"] not in messages:
                messages.append(r["error"])
        if not good:
            method_metrics[method] = MethodMetrics(
                method=method,
                successes=0,
                failures=failures,
                bias=None,
                rmse=None,
                mean_estimate=None,
                mean_ress=None,
                coverage=None,
                leftover_imbalance={},
                split_correlation=None,
                failure_messages=tuple(messages[:5]),
            )
            continue
        estimates = np.array([r["estimate"] for r in good])
        errors = estimates - 0.0  # the generating processes have zero effect
        bias = float(np.mean(errors))
        rmse = float(np.sqrt(np.mean(errors**2)))
        if rmse * rmse < bias * bias - 1e-12:
            raise NumericalError("rmse^2 fell below bias^2; aggregation is broken")
        leftover_mean = np.mean([r["leftover"] for r in good], axis=0)
        covered = [r["covered"] for r in good if r["covered"] is not None]
        corr = None
        p1 = [r["fold_point_1"] for r in good if r["fold_point_1"] is not None]
        p2 = [r["fold_point_2"] for r in good if r["fold_point_2"] is not None]
        if len(p1) >= 30 and len(p1) == len(p2):
            corr = pearson_correlation(p1, p2)
        method_metrics[method] = MethodMetrics(
            method=method,
            successes=len(good),
            failures=failures,
            bias=bias,
            rmse=rmse,
            mean_estimate=float(np.mean(estimates)),
            mean_ress=float(np.mean([r["ress"] for r in good])),
            coverage=(float(np.mean(covered)) if covered else None),
            leftover_imbalance=_with_summaries(latent_names, leftover_mean, key),
            split_correlation=corr,
            failure_messages=tuple(messages[:5]),
        )

    return MetricsReport(
        dgp=key,
        n=int(n),
        replicates=int(replicates),
        base_seed=int(base_seed),
        q=float(q),
        gamma=float(gamma),
        true_att=0.0,
        latent_names=latent_names,
        initial_imbalance=initial,
        methods=method_metrics,
        per_replicate=tuple(per_replicate),
    )


def pearson_correlation(first, second) -> float:
    """Sample correlation of two equal-length vectors."""
    a = np.asarray(first, dtype=float)
    b = np.asarray(second, dtype=float)
    if a.ndim != 1 or a.shape != b.shape:
        raise DataError("correlation inputs must be equal-length vectors")
    if a.size < 2:
        raise DataError("correlation needs at least two observations")
    ac = a - a.mean()
    bc = b - b.mean()
    denom = float(np.sqrt(ac @ ac) * np.sqrt(bc @ bc))
    if denom == 0.0:
        raise NumericalError("zero variance in correlation input")
    return float(ac @ bc / denom)


def split_correlation(
    dgp,
    n: int,
    replicates: int,
    seed: int = 0,
    method: str = "tfb_lasso",
    q: float = 0.95,
    gamma: float = 0.95,
    workers: int | None = None,
) -> float:
    """Correlation across replicates of the two fold estimates from one
    cross-fit split — the overlap diagnostic for split dependence."""
    if replicates < 30:
        raise DataError(f"split correlation needs at least 30 replicates, got {replicates}")
    if method not in TFB_METHODS:
        raise DataError(
            f"split correlation applies to cross-fit methods, got {method!r}; "
            + "choose one of: " + ", ".join(TFB_METHODS)
        )
    report = run_monte_carlo(
        dgp, n, replicates, (method,), base_seed=seed, q=q, gamma=gamma, workers=workers
    )
    value = report.methods[method].split_correlation
    if value is None:
        raise NumericalError("too few successful replicates for a correlation")
    return value


def metrics_to_dict(report: MetricsReport) -> dict:
    """JSON-ready view of a MetricsReport (without per-replicate rows)."""
    return {
        "dgp": report.dgp,
        "n": report.n,
        "replicates": report.replicates,
        "base_seed": report.base_seed,
        "q": report.q,
        "gamma": report.gamma,
        "true_att": report.true_att,
        "latent_names": list(report.latent_names),
        "initial_imbalance": dict(report.initial_imbalance),
        "methods": {
            name: {
                "successes": m.successes,
                "failures": m.failures,
                "bias": m.bias,
                "rmse": m.rmse,
                "mean_estimate": m.mean_estimate,
                "mean_ress": m.mean_ress,
                "coverage": m.coverage,
                "leftover_imbalance": dict(m.leftover_imbalance),
                "split_correlation": m.split_correlation,
                "failure_messages": list(m.failure_messages),
            }
            for name, m in report.methods.items()
        },
    }


def per_replicate_rows(report: MetricsReport) -> list[dict]:
    """Flat per-replicate rows (one per replicate x method) for CSV dumps."""
    return [dict(row) for row in report.per_replicate]
