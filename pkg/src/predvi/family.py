"""Gaussian-mixture variational family with covariate-dependent softmax gating.

A posterior holds K Gaussian components (means + Cholesky-parameterized
covariances) and K-1 free gating vectors; the first component's gating logit
is pinned to zero for identifiability. The covariate-independent family is the
special case of intercept-only gating (gating dimension 1).
"""

import json
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from ._rng import seed_stream
from .errors import DataError
from .gaussians import CholeskyFactor, mvn_logpdf

_LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass(frozen=True)
class MixturePosterior:
    """Variational parameters: gating `eta` (K-1, g), `means` (K, p), `chol_raw` (K, p, p)."""

    means: np.ndarray
    chol_raw: np.ndarray
    eta: np.ndarray

    def __post_init__(self):
        means = np.asarray(self.means, dtype=float)
        raw = np.asarray(self.chol_raw, dtype=float)
        eta = np.asarray(self.eta, dtype=float)
        if means.ndim != 2:
            raise ValueError("means must be (K, p)")
        k, p = means.shape
        if raw.shape != (k, p, p):
            raise ValueError("chol_raw must be (K, p, p)")
        if eta.ndim != 2 or eta.shape[0] != k - 1:
            raise ValueError("eta must be (K-1, gating_dim)")
        object.__setattr__(self, "means", means)
        object.__setattr__(self, "chol_raw", raw)
        object.__setattr__(self, "eta", eta)

    @property
    def n_components(self) -> int:
        return self.means.shape[0]

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @property
    def gating_dim(self) -> int:
        return self.eta.shape[1]

    def factor(self, k: int) -> CholeskyFactor:
        return CholeskyFactor(self.chol_raw[k])

    def covariances(self) -> np.ndarray:
        out = np.empty_like(self.chol_raw)
        for k in range(self.n_components):
            c = self.factor(k).matrix()
            out[k] = c @ c.T
        return out

    def to_json_dict(self) -> dict:
        """Fixed-order JSON document; Cholesky raws stored as columnwise vech."""
        from .gaussians import vech

        return {
            "K": int(self.n_components),
            "dim": int(self.dim),
            "gating_dim": int(self.gating_dim),
            "means": [[float(v) for v in row] for row in self.means],
            "cholesky_raw": [
                [float(v) for v in vech(self.chol_raw[k])]
                for k in range(self.n_components)
            ],
            "eta": [[float(v) for v in row] for row in self.eta],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_json_dict())

    @classmethod
    def from_json_dict(cls, doc: dict) -> "MixturePosterior":
        from .gaussians import unvech

        k, p, g = int(doc["K"]), int(doc["dim"]), int(doc["gating_dim"])
        means = np.asarray(doc["means"], dtype=float).reshape(k, p)
        raw = np.stack([unvech(np.asarray(v, dtype=float), p) for v in doc["cholesky_raw"]])
        eta = np.asarray(doc["eta"], dtype=float).reshape(k - 1, g)
        return cls(means=means, chol_raw=raw, eta=eta)

    @classmethod
    def from_json(cls, text: str) -> "MixturePosterior":
        return cls.from_json_dict(json.loads(text))


@dataclass(frozen=True)
class AveragedPosterior:
    """Covariate-free mixture summary: weights are training-set gating averages."""

    weights: np.ndarray
    means: np.ndarray
    chol_raw: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        if w.ndim != 1 or w.shape[0] != np.asarray(self.means).shape[0]:
            raise ValueError("weights must be a K-vector")
        object.__setattr__(self, "weights", w)

    @property
    def n_components(self) -> int:
        return self.weights.shape[0]

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def covariances(self) -> np.ndarray:
        out = np.empty_like(self.chol_raw)
        for k in range(self.n_components):
            c = CholeskyFactor(self.chol_raw[k]).matrix()
            out[k] = c @ c.T
        return out


def gating_logits(post: MixturePosterior, x_gate: np.ndarray) -> np.ndarray:
    x_gate = np.atleast_2d(np.asarray(x_gate, dtype=float))
    if x_gate.shape[1] != post.gating_dim:
        raise ValueError(
            f"gating input has dimension {x_gate.shape[1]}, posterior expects {post.gating_dim}"
        )
    free = x_gate @ post.eta.T
    return np.concatenate([np.zeros((x_gate.shape[0], 1)), free], axis=1)


def mixture_weights(post: MixturePosterior, x_gate: np.ndarray) -> np.ndarray:
    """Softmax gating weights at x (or rows of x); max-subtracted for stability."""
    single = np.asarray(x_gate).ndim == 1
    logits = gating_logits(post, x_gate)
    logits = logits - logits.max(axis=1, keepdims=True)
    w = np.exp(logits)
    w /= w.sum(axis=1, keepdims=True)
    return w[0] if single else w


def averaged_posterior(post: MixturePosterior, x_gate: np.ndarray) -> AveragedPosterior:
    x_gate = np.atleast_2d(np.asarray(x_gate, dtype=float))
    if x_gate.shape[0] == 0:
        raise DataError("averaged_posterior needs at least one gating row")
    w = mixture_weights(post, x_gate).mean(axis=0)
    return AveragedPosterior(weights=w, means=post.means, chol_raw=post.chol_raw)


def sample_theta(post: AveragedPosterior, n_draws: int, seed: int) -> np.ndarray:
    """Ancestral sampling from the averaged mixture; reproducible given seed."""
    if n_draws < 1:
        raise ValueError("n_draws must be >= 1")
    rng = seed_stream(seed, "sampling")
    comps = rng.choice(post.n_components, size=n_draws, p=post.weights / post.weights.sum())
    z = rng.standard_normal((n_draws, post.dim))
    out = np.empty((n_draws, post.dim))
    for k in range(post.n_components):
        mask = comps == k
        if not mask.any():
            continue
        c = CholeskyFactor(post.chol_raw[k]).matrix()
        out[mask] = post.means[k] + z[mask] @ c.T
    return out


def mixture_logpdf(post: AveragedPosterior, theta: np.ndarray) -> np.ndarray:
    """log of the averaged-mixture density at theta rows."""
    theta = np.atleast_2d(theta)
    covs = post.covariances()
    comp = np.stack(
        [mvn_logpdf(theta, post.means[k], covs[k]) for k in range(post.n_components)],
        axis=1,
    )
    return logsumexp(comp + np.log(post.weights)[None, :], axis=1)


def entropy_lower_bound(post: AveragedPosterior) -> float:
    """Pairwise-density lower bound on the mixture's differential entropy."""
    k = post.n_components
    covs = post.covariances()
    pairwise = np.empty((k, k))
    for i in range(k):
        for j in range(k):
            pairwise[i, j] = mvn_logpdf(post.means[i], post.means[j], covs[i] + covs[j])
    inner = logsumexp(pairwise + np.log(post.weights)[None, :], axis=1)
    w = post.weights
    return float(-np.sum(np.where(w > 0.0, w * inner, 0.0)))
