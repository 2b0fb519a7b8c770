"""Cholesky-parameterized covariances and multivariate normal densities.

Covariances are optimized through lower-triangular factors whose diagonal is
stored on the log scale, so every unconstrained raw matrix maps to a valid
SPD covariance ``C C^T``.
"""

from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular

from .errors import NumericalError

_LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass(frozen=True)
class CholeskyFactor:
    """Lower-triangular factor with log-transformed diagonal (`raw`)."""

    raw: np.ndarray

    def __post_init__(self):
        raw = np.asarray(self.raw, dtype=float)
        if raw.ndim != 2 or raw.shape[0] != raw.shape[1]:
            raise ValueError("raw must be a square matrix")
        object.__setattr__(self, "raw", raw)

    @property
    def dim(self) -> int:
        return self.raw.shape[0]

    def matrix(self) -> np.ndarray:
        """The factor C: strictly-lower part of raw, diagonal exp(raw_jj)."""
        c = np.tril(self.raw, k=-1)
        c[np.diag_indices(self.dim)] = np.exp(np.diag(self.raw))
        return c


def chol_to_cov(factor: CholeskyFactor) -> np.ndarray:
    c = factor.matrix()
    return c @ c.T


def cov_to_chol(cov: np.ndarray) -> CholeskyFactor:
    cov = np.asarray(cov, dtype=float)
    try:
        c = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"covariance is not positive definite: {exc}") from exc
    raw = np.tril(c, k=-1)
    raw[np.diag_indices(cov.shape[0])] = np.log(np.diag(c))
    return CholeskyFactor(raw)


def _as_factor_matrix(cov) -> np.ndarray:
    if isinstance(cov, CholeskyFactor):
        return cov.matrix()
    return cov_to_chol(cov).matrix()


def mvn_logpdf(x: np.ndarray, mean: np.ndarray, cov) -> float:
    """log phi(x; mean, Sigma) with Sigma given densely or as a CholeskyFactor.

    `x` may be a single p-vector or an (n, p) batch of points.
    """
    x = np.asarray(x, dtype=float)
    mean = np.asarray(mean, dtype=float)
    if x.shape[-1] != mean.shape[-1] or mean.ndim != 1 or x.ndim > 2:
        raise ValueError("x must be (p,) or (n, p) and mean (p,)")
    c = _as_factor_matrix(cov)
    if c.shape[0] != x.shape[-1]:
        raise ValueError("covariance dimension does not match x")
    z = solve_triangular(c, (x - mean).T, lower=True)
    quad = np.sum(z * z, axis=0)
    logdet = 2.0 * np.sum(np.log(np.diag(c)))
    out = -0.5 * (x.shape[-1] * _LOG_2PI + logdet + quad)
    return float(out) if np.isscalar(quad) or quad.ndim == 0 else out


def vech(a: np.ndarray) -> np.ndarray:
    """Stack the lower triangle columnwise, left to right."""
    p = a.shape[0]
    return np.concatenate([a[j:, j] for j in range(p)])


def unvech(v: np.ndarray, p: int) -> np.ndarray:
    """Inverse of `vech` into a lower-triangular p x p matrix."""
    out = np.zeros((p, p))
    pos = 0
    for j in range(p):
        out[j:, j] = v[pos : pos + p - j]
        pos += p - j
    if pos != len(v):
        raise ValueError("vech vector length does not match dimension")
    return out
