"""Dataset container, validation, and covariate preprocessing.

All estimation code in this package works on a :class:`Dataset`, which
stores outcomes, a binary treatment indicator, and a covariate matrix in
*control-first* order: rows ``0..n_c-1`` are control units and rows
``n_c..n-1`` are treated units.  The permutation applied to reach that
ordering is recorded so that per-unit output (weights, predictions) can be
reported in the caller's original row order.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .errors import DataError


class Estimand(Enum):
    """Which average treatment effect is being estimated."""

    ATT = "att"
    ATC = "atc"
    ATE = "ate"

    @classmethod
    def parse(cls, text: str) -> "Estimand":
        try:
            return cls(text.lower())
        except ValueError:
            raise DataError(
                f"unknown estimand {text!r}; expected one of "
                f"{[e.value for e in cls]}"
            ) from None


@dataclass(frozen=True)
class Dataset:
    """Validated sample in control-first order.

    Attributes
    ----------
    y : ndarray, shape (n,)
        Outcomes.
    d : ndarray, shape (n,)
        Treatment indicator in {0, 1}; all zeros precede all ones.
    x : ndarray, shape (n, p)
        Covariate matrix.
    order : ndarray, shape (n,)
        ``order[k]`` is the input row index of internal row ``k``.
    columns : tuple of str
        Covariate column names.
    """

    y: np.ndarray
    d: np.ndarray
    x: np.ndarray
    order: np.ndarray
    columns: tuple[str, ...]

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def n_control(self) -> int:
        return int(np.sum(self.d == 0))

    @property
    def n_treated(self) -> int:
        return int(np.sum(self.d == 1))

    @property
    def p(self) -> int:
        return self.x.shape[1]

    def control_rows(self) -> np.ndarray:
        return np.arange(self.n_control)

    def treated_rows(self) -> np.ndarray:
        return np.arange(self.n_control, self.n)


@dataclass(frozen=True)
class Standardization:
    """Per-column location/scale used by :func:`standardize_covariates`."""

    mean: np.ndarray
    sd: np.ndarray
    constant: np.ndarray  # boolean flags: column left unscaled


@dataclass(frozen=True)
class FoldAssignment:
    """Stratified two-fold split aligned to a dataset's internal order."""

    fold: np.ndarray  # (n,) values in {0, 1}
    seed: int

    def rows(self, fold_id: int) -> np.ndarray:
        return np.flatnonzero(self.fold == fold_id)


def validate(y, d, x, columns: tuple[str, ...] | None = None) -> Dataset:
    """Check raw inputs and return a control-first :class:`Dataset`.

    Parameters
    ----------
    y, d, x : array-like
        Outcomes (n,), treatment indicator (n,), covariates (n, p).
    columns : tuple of str, optional
        Covariate names; defaults to ``x1..xp``.

    Raises
    ------
    DataError
        On shape mismatch, non-finite values, or a treatment value
        outside {0, 1}; messages include the offending row/column.
    """
    y = np.asarray(y, dtype=float)
    d_raw = np.asarray(d)
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    if y.ndim != 1:
        raise DataError(f"outcomes must be one-dimensional, got shape {y.shape}")
    if x.ndim != 2:
        raise DataError(f"covariates must be two-dimensional, got shape {x.shape}")
    n = y.shape[0]
    if d_raw.shape != (n,):
        raise DataError(
            f"treatment shape {d_raw.shape} does not match {n} outcomes"
        )
    if x.shape[0] != n:
        raise DataError(
            f"covariate rows ({x.shape[0]}) do not match outcomes ({n})"
        )
    if x.shape[1] < 1:
        raise DataError("need at least one covariate column")

    bad = np.flatnonzero(~np.isfinite(y))
    if bad.size:
        raise DataError(f"non-finite outcome at row {bad[0]}")
    d_float = np.asarray(d_raw, dtype=float)
    bad = np.flatnonzero(~np.isfinite(d_float))
    if bad.size:
        raise DataError(f"non-finite treatment at row {bad[0]}")
    bad = np.flatnonzero(~(np.isin(d_float, (0.0, 1.0))))
    if bad.size:
        i = bad[0]
        raise DataError(f"treatment value {d_raw[i]!r} at row {i} is not 0 or 1")
    bad_rows, bad_cols = np.nonzero(~np.isfinite(x))
    if bad_rows.size:
        raise DataError(
            f"non-finite covariate at row {bad_rows[0]}, column {bad_cols[0]}"
        )

    if columns is None:
        columns = tuple(f"x{j + 1}" for j in range(x.shape[1]))
    else:
        columns = tuple(columns)
        if len(columns) != x.shape[1]:
            raise DataError(
                f"{len(columns)} column names for {x.shape[1]} covariates"
            )

    d_int = d_float.astype(np.int8)
    if not np.any(d_int == 0):
        raise DataError("no control units (treatment == 0)")
    if not np.any(d_int == 1):
        raise DataError("no treated units (treatment == 1)")

    # Stable control-first permutation: controls keep their relative input
    # order, treated likewise.
    order = np.concatenate([np.flatnonzero(d_int == 0), np.flatnonzero(d_int == 1)])
    return Dataset(
        y=y[order].copy(),
        d=d_int[order].copy(),
        x=x[order].copy(),
        order=order,
        columns=columns,
    )


def standardize_covariates(ds: Dataset) -> tuple[Dataset, Standardization]:
    """Scale each covariate column to sample mean 0 and sample sd 1.

    The sample standard deviation uses the n-1 denominator.  Constant
    columns are left unchanged and flagged (with a warning) rather than
    divided by zero.
    """
    mean = ds.x.mean(axis=0)
    sd = ds.x.std(axis=0, ddof=1)
    constant = sd == 0.0
    if np.any(constant):
        names = [ds.columns[j] for j in np.flatnonzero(constant)]
        warnings.warn(
            f"constant covariate column(s) left unscaled: {', '.join(names)}",
            stacklevel=2,
        )
    out_mean = np.where(constant, 0.0, mean)
    out_sd = np.where(constant, 1.0, sd)
    x = (ds.x - out_mean) / out_sd
    record = Standardization(mean=out_mean, sd=out_sd, constant=constant)
    return (
        Dataset(y=ds.y, d=ds.d, x=x, order=ds.order, columns=ds.columns),
        record,
    )


def _expansion_names(columns: tuple[str, ...]) -> list[tuple[int, int, str]]:
    out = []
    p = len(columns)
    for j in range(p):
        for k in range(j, p):
            name = f"{columns[j]}^2" if j == k else f"{columns[j]}:{columns[k]}"
            out.append((j, k, name))
    return out


def expand_features(ds: Dataset, exclude: tuple[str, ...] = ()) -> Dataset:
    """Append squares and pairwise interactions of the covariate columns.

    Generated columns are named ``"a^2"`` for squares and ``"a:b"`` for
    interactions (in the original column order, b no earlier than a).
    Entries of ``exclude`` name generated columns to drop.

    Raises
    ------
    DataError
        If an exclusion does not name a generated column (for example it
        references an unknown column).
    """
    candidates = _expansion_names(ds.columns)
    known = {name for _, _, name in candidates}
    for item in exclude:
        if item not in known:
            raise DataError(
                f"exclusion {item!r} references an unknown column or is not "
                f"a square/interaction of the dataset's columns"
            )
    dropped = set(exclude)
    keep = [(j, k, name) for j, k, name in candidates if name not in dropped]
    extra = np.empty((ds.n, len(keep)))
    for idx, (j, k, _) in enumerate(keep):
        extra[:, idx] = ds.x[:, j] * ds.x[:, k]
    x = np.hstack([ds.x, extra])
    columns = ds.columns + tuple(name for _, _, name in keep)
    return Dataset(y=ds.y, d=ds.d, x=x, order=ds.order, columns=columns)


def split_sample(ds: Dataset, seed: int) -> FoldAssignment:
    """Assign units to two folds, stratified by treatment.

    Controls are split as evenly as possible between the folds, and
    likewise treated units.  The assignment is a deterministic function
    of (n, treatment, seed).

    Raises
    ------
    DataError
        If either group has fewer than 4 units (each fold must get at
        least 2 controls and 2 treated units).
    """
    n_c, n_t = ds.n_control, ds.n_treated
    if n_c < 4 or n_t < 4:
        raise DataError(
            f"splitting needs at least 4 controls and 4 treated units, "
            f"got {n_c} and {n_t}"
        )
    rng = np.random.Generator(np.random.Philox(seed))
    keys = rng.random(ds.n)
    fold = np.empty(ds.n, dtype=np.int8)
    for rows in (ds.control_rows(), ds.treated_rows()):
        ranked = rows[np.argsort(keys[rows], kind="stable")]
        half = math.ceil(rows.size / 2)
        fold[ranked[:half]] = 0
        fold[ranked[half:]] = 1
    return FoldAssignment(fold=fold, seed=seed)


def subset(ds: Dataset, rows: np.ndarray) -> Dataset:
    """Dataset restricted to ``rows`` (internal indices), revalidated."""
    rows = np.asarray(rows)
    sub = validate(ds.y[rows], ds.d[rows], ds.x[rows], ds.columns)
    # Map the subset's recorded input rows back to the parent's original
    # input order so weight reports stay aligned with the caller's data.
    object.__setattr__(sub, "order", ds.order[rows][sub.order])
    return sub
