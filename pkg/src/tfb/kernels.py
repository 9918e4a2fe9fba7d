"""Gaussian kernel machinery for the kernel-regularized outcome model.

The kernel is ``K(x_i, x_j) = exp(-||x_i - x_j||^2 / b)`` with bandwidth
``b``.  The default bandwidth equals the number of covariate columns
(applied to standardized covariates).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataError


@dataclass(frozen=True)
class KernelSpec:
    """Gaussian kernel with squared-distance bandwidth ``b > 0``."""

    bandwidth: float

    def __post_init__(self):
        b = self.bandwidth
        if not np.isfinite(b) or b <= 0:
            raise DataError(f"kernel bandwidth must be positive, got {b!r}")


def default_bandwidth(p: int) -> float:
    """Default bandwidth: the number of covariate columns."""
    return float(p)


@dataclass(frozen=True)
class GramBlocks:
    """Full gram matrix with views into its treatment blocks.

    Rows/columns follow the dataset's control-first internal order, so
    the leading ``n_control`` indices are control units.
    """

    matrix: np.ndarray  # (n, n)
    n_control: int

    @property
    def control_columns(self) -> np.ndarray:
        """(n, n_control) block: every unit against the control units."""
        return self.matrix[:, : self.n_control]

    @property
    def control_control(self) -> np.ndarray:
        return self.matrix[: self.n_control, : self.n_control]

    @property
    def treated_control(self) -> np.ndarray:
        return self.matrix[self.n_control :, : self.n_control]

    @property
    def treated_columns(self) -> np.ndarray:
        """(n, n_treated) block: every unit against the treated units."""
        return self.matrix[:, self.n_control :]

    @property
    def treated_treated(self) -> np.ndarray:
        return self.matrix[self.n_control :, self.n_control :]


def _pairwise_sq_dists(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    ra = np.einsum("ij,ij->i", a, a)
    rb = np.einsum("ij,ij->i", b, b)
    d = ra[:, None] + rb[None, :] - 2.0 * (a @ b.T)
    np.maximum(d, 0.0, out=d)
    return d


def gram_square(x: np.ndarray, spec: KernelSpec) -> np.ndarray:
    """Gram matrix of one point set against itself.

    Made exactly symmetric by computing the upper triangle and mirroring
    it, with a unit diagonal set explicitly.
    """
    x = np.asarray(x, dtype=float)
    if x.ndim != 2:
        raise DataError(f"covariates must be two-dimensional, got shape {x.shape}")
    d = _pairwise_sq_dists(x, x)
    k = np.exp(-d / spec.bandwidth)
    upper = np.triu(k, 1)
    k = upper + upper.T
    np.fill_diagonal(k, 1.0)
    return k


def gram_matrix(x: np.ndarray, n_control: int, spec: KernelSpec) -> GramBlocks:
    """Gram matrix of ``x`` (control-first rows) under ``spec``."""
    x = np.asarray(x, dtype=float)
    if x.ndim != 2:
        raise DataError(f"covariates must be two-dimensional, got shape {x.shape}")
    n = x.shape[0]
    if not 0 < n_control < n:
        raise DataError(
            f"control count {n_control} must lie strictly between 0 and {n}"
        )
    return GramBlocks(matrix=gram_square(x, spec), n_control=n_control)


def kernel_features(x_new: np.ndarray, anchors: np.ndarray, spec: KernelSpec) -> np.ndarray:
    """Kernel design rows for new points against fixed anchor points.

    Returns the (m, a) matrix with entries ``K(x_new[i], anchors[j])``.
    A one-dimensional ``x_new`` is treated as a single point, returning
    shape (a,).
    """
    x_new = np.asarray(x_new, dtype=float)
    single = x_new.ndim == 1
    if single:
        x_new = x_new[None, :]
    anchors = np.asarray(anchors, dtype=float)
    if x_new.shape[1] != anchors.shape[1]:
        raise DataError(
            f"point dimension {x_new.shape[1]} does not match anchors "
            f"({anchors.shape[1]})"
        )
    k = np.exp(-_pairwise_sq_dists(x_new, anchors) / spec.bandwidth)
    return k[0] if single else k
