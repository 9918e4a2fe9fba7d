"""Balancing weights targeted at a fitted outcome regression.

The package fits an outcome model on one treatment group, turns the
fit and its coefficient uncertainty into an imbalance diagnostic, and
solves a convex program for weights that minimize that diagnostic plus
a dispersion penalty.  Cross-fitting, repeated-split aggregation,
comparator weighting methods, and a seeded Monte Carlo harness are
included; ``tfb.io_cli`` provides the command-line entry point.
"""

from .balance_metrics import (
    TfiReport,
    TfiSide,
    chi_sq_cdf,
    chi_sq_quantile,
    ewc_bias_estimate,
    imbalance,
    normal_quantile,
    psd_sqrt_factor,
    ress,
    tfi,
)
from .baselines import (
    dim,
    entropy_balancing,
    oracle_propensity_weights,
    stable_balancing,
)
from .dataset import (
    Dataset,
    Estimand,
    FoldAssignment,
    Standardization,
    expand_features,
    split_sample,
    standardize_covariates,
    subset,
    validate,
)
from .effect_estimators import (
    EstimateReport,
    EstimatorConfig,
    FoldEstimate,
    ImbalanceTable,
    SplitEstimate,
    SplitResult,
    augmented,
    build_report,
    confidence_interval,
    cross_fit_estimate,
    estimate_with_splits,
    fit_full_sample,
    fit_outcome_models,
    median_aggregate,
    solve_full_sample,
    variance_hat,
    wdim,
)
from .errors import DataError, InfeasibleError, NumericalError
from .io_cli import main, read_csv
from .kernels import (
    GramBlocks,
    KernelSpec,
    default_bandwidth,
    gram_matrix,
    gram_square,
    kernel_features,
)
from .outcome_models import (
    CvConfig,
    KernelMap,
    LinearMap,
    OutcomeModelFit,
    cv_fold_ids,
    fit_krls,
    fit_lasso_bootstrap,
    fit_ols_sandwich,
    predict,
)
from .simulation import (
    SUPPORTED_METHODS,
    DgpDraw,
    MethodMetrics,
    MetricsReport,
    draw_dgp1,
    draw_dgp2,
    metrics_to_dict,
    normal_draws,
    pearson_correlation,
    per_replicate_rows,
    radial_features,
    run_monte_carlo,
    run_replicate,
    split_correlation,
)
from .tfb_solver import (
    SolverConfig,
    TfbProblem,
    WeightSolution,
    build_problem,
    project_scaled_simplex,
    solve,
    tfb_objective,
)

__version__ = "0.1.0"

__all__ = [
    "CvConfig",
    "DataError",
    "Dataset",
    "DgpDraw",
    "EstimateReport",
    "Estimand",
    "EstimatorConfig",
    "FoldAssignment",
    "FoldEstimate",
    "GramBlocks",
    "ImbalanceTable",
    "InfeasibleError",
    "KernelMap",
    "KernelSpec",
    "LinearMap",
    "MethodMetrics",
    "MetricsReport",
    "NumericalError",
    "OutcomeModelFit",
    "SUPPORTED_METHODS",
    "SolverConfig",
    "SplitEstimate",
    "SplitResult",
    "Standardization",
    "TfbProblem",
    "TfiReport",
    "TfiSide",
    "WeightSolution",
    "augmented",
    "build_problem",
    "build_report",
    "chi_sq_cdf",
    "chi_sq_quantile",
    "confidence_interval",
    "cross_fit_estimate",
    "cv_fold_ids",
    "default_bandwidth",
    "dim",
    "draw_dgp1",
    "draw_dgp2",
    "entropy_balancing",
    "estimate_with_splits",
    "ewc_bias_estimate",
    "expand_features",
    "fit_full_sample",
    "fit_krls",
    "fit_lasso_bootstrap",
    "fit_ols_sandwich",
    "fit_outcome_models",
    "gram_matrix",
    "gram_square",
    "imbalance",
    "kernel_features",
    "main",
    "median_aggregate",
    "metrics_to_dict",
    "normal_draws",
    "normal_quantile",
    "oracle_propensity_weights",
    "pearson_correlation",
    "per_replicate_rows",
    "predict",
    "project_scaled_simplex",
    "psd_sqrt_factor",
    "radial_features",
    "read_csv",
    "ress",
    "run_monte_carlo",
    "run_replicate",
    "solve",
    "solve_full_sample",
    "split_correlation",
    "split_sample",
    "stable_balancing",
    "standardize_covariates",
    "subset",
    "tfb_objective",
    "tfi",
    "validate",
    "wdim",
]
