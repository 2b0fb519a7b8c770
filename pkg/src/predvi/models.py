"""Model-specific closed forms: expected log-priors and log-likelihoods under a
Gaussian component, and mixture predictive densities.

Gaussian-likelihood predictives are exact Gaussian mixtures; logistic and
Poisson predictives use the one-dimensional Gauss-Hermite route over the
linear predictor; the unknown-variance Gaussian model quadratures over
tau = log sigma^2 with the conditional Gaussian in the coefficients.
"""

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve, solve_triangular
from scipy.special import gammaln, log_expit, logsumexp

from .errors import DataError, NumericalError
from .family import MixturePosterior, gating_logits
from .quadrature import QuadratureRule, gauss_hermite_rule

_LOG_2PI = float(np.log(2.0 * np.pi))
DENSITY_FLOOR = 1e-300
LOG_DENSITY_FLOOR = float(np.log(DENSITY_FLOOR))
DEFAULT_QUAD_ORDER = 20


@dataclass(frozen=True)
class PriorSpec:
    kind: str
    tau: float | None = None
    omega: np.ndarray | None = None

    @classmethod
    def isotropic(cls, tau: float) -> "PriorSpec":
        if tau <= 0:
            raise ValueError("tau must be positive")
        return cls(kind="isotropic", tau=float(tau))

    @classmethod
    def general(cls, omega: np.ndarray) -> "PriorSpec":
        omega = np.asarray(omega, dtype=float)
        if omega.ndim != 2 or omega.shape[0] != omega.shape[1]:
            raise ValueError("omega must be a square matrix")
        return cls(kind="general", omega=omega)

    def omega_cholesky(self) -> np.ndarray:
        try:
            return np.linalg.cholesky(self.omega)
        except np.linalg.LinAlgError as exc:
            raise NumericalError(f"prior covariance is not SPD: {exc}") from exc


GLM_KINDS = ("gaussian", "gaussian_unknown_variance", "logistic", "poisson")


@dataclass(frozen=True)
class LikelihoodModel:
    kind: str
    sigma2: float | None = None

    @classmethod
    def gaussian(cls, sigma2: float) -> "LikelihoodModel":
        if sigma2 <= 0:
            raise ValueError("sigma2 must be positive")
        return cls(kind="gaussian", sigma2=float(sigma2))

    @classmethod
    def gaussian_unknown_variance(cls) -> "LikelihoodModel":
        return cls(kind="gaussian_unknown_variance")

    @classmethod
    def logistic(cls) -> "LikelihoodModel":
        return cls(kind="logistic")

    @classmethod
    def poisson(cls) -> "LikelihoodModel":
        return cls(kind="poisson")

    def theta_dim(self, n_covariates: int) -> int:
        """Parameter dimension; unknown-variance stacks log sigma^2 after the coefficients."""
        return n_covariates + 1 if self.kind == "gaussian_unknown_variance" else n_covariates

    def validate_response(self, y: np.ndarray) -> None:
        y = np.asarray(y)
        if self.kind == "logistic" and not np.isin(y, (0, 1)).all():
            raise DataError("logistic responses must lie in {0, 1}")
        if self.kind == "poisson":
            if (y < 0).any() or not np.allclose(y, np.round(y)):
                raise DataError("poisson responses must be nonnegative integers")


def expected_log_prior(prior: PriorSpec, mean: np.ndarray, cov: np.ndarray) -> float:
    """E[log p(theta)] under phi(theta; mean, cov), exact."""
    mean = np.asarray(mean, dtype=float)
    cov = np.asarray(cov, dtype=float)
    p = mean.shape[0]
    if cov.shape != (p, p):
        raise ValueError("cov must be (p, p) matching mean")
    if prior.kind == "isotropic":
        tau2 = prior.tau**2
        return float(
            -0.5 * p * np.log(2.0 * np.pi * tau2)
            - 0.5 / tau2 * (mean @ mean + np.trace(cov))
        )
    chol = prior.omega_cholesky()
    zm = solve_triangular(chol, mean, lower=True)
    zc = solve_triangular(chol, np.linalg.cholesky(cov + 1e-300 * np.eye(p)), lower=True)
    half_logdet = np.sum(np.log(np.diag(chol)))
    return float(-0.5 * p * _LOG_2PI - half_logdet - 0.5 * (zm @ zm + np.sum(zc * zc)))


def _check_design(model, x, y, mean, cov):
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    mean = np.asarray(mean, dtype=float)
    cov = np.asarray(cov, dtype=float)
    model.validate_response(y)
    if mean.shape[0] != model.theta_dim(x.shape[1]):
        raise ValueError("mean dimension does not match model/theta layout")
    if cov.shape != (mean.shape[0], mean.shape[0]):
        raise ValueError("cov shape does not match mean")
    return x, y, mean, cov


def expected_loglik(
    model: LikelihoodModel,
    x: np.ndarray,
    y: np.ndarray,
    mean: np.ndarray,
    cov: np.ndarray,
    quad: QuadratureRule | None = None,
) -> float:
    """E[log p(y | theta)] under phi(theta; mean, cov).

    Closed form for the Gaussian (fixed and unknown-variance) and Poisson
    models; B-point quadrature with per-observation scale sqrt(x^T Sigma x)
    for logistic.
    """
    x, y, mean, cov = _check_design(model, x, y, mean, cov)
    n = x.shape[0]
    if model.kind == "gaussian":
        resid = y - x @ mean
        quad_term = np.einsum("ni,ij,nj->n", x, cov, x)
        return float(
            -0.5 * n * np.log(2.0 * np.pi * model.sigma2)
            - 0.5 / model.sigma2 * np.sum(resid**2 + quad_term)
        )
    if model.kind == "poisson":
        lin = x @ mean
        quad_term = np.einsum("ni,ij,nj->n", x, cov, x)
        return float(np.sum(y * lin - np.exp(lin + 0.5 * quad_term) - gammaln(y + 1.0)))
    if model.kind == "gaussian_unknown_variance":
        mu_b, mu_t = mean[:-1], mean[-1]
        s_bb = cov[:-1, :-1]
        s_bt = cov[:-1, -1]
        s_tt = cov[-1, -1]
        resid = y - x @ (mu_b - s_bt)
        quad_term = np.einsum("ni,ij,nj->n", x, s_bb, x)
        return float(
            -0.5 * n * _LOG_2PI
            - 0.5 * n * mu_t
            - 0.5 * np.exp(-mu_t + 0.5 * s_tt) * np.sum(resid**2 + quad_term)
        )
    # logistic: quadrature over the scalar linear predictor
    rule = quad or gauss_hermite_rule(DEFAULT_QUAD_ORDER)
    lin = x @ mean
    scale = np.sqrt(np.maximum(np.einsum("ni,ij,nj->n", x, cov, x), 0.0))
    node_lin = lin[:, None] + scale[:, None] * rule.nodes[None, :]
    node_ll = y[:, None] * log_expit(node_lin) + (1.0 - y[:, None]) * log_expit(-node_lin)
    return float(np.sum(node_ll @ rule.weights))


def _pointwise_logpmf(kind: str, y, lin):
    """log p(y | linear predictor), broadcasting y against lin."""
    if kind == "logistic":
        return y * log_expit(lin) + (1.0 - y) * log_expit(-lin)
    if kind == "poisson":
        return y * lin - np.exp(lin) - gammaln(y + 1.0)
    raise ValueError(kind)


def predictive_log_density(
    model: LikelihoodModel,
    post: MixturePosterior,
    x: np.ndarray,
    y: np.ndarray,
    quad: QuadratureRule | None = None,
    x_gate: np.ndarray | None = None,
) -> np.ndarray:
    """log q(y_i | x_i) for each row; gating evaluated at x_gate (default: x itself)."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    y = np.atleast_1d(np.asarray(y, dtype=float))
    model.validate_response(y)
    x_gate = x if x_gate is None else np.atleast_2d(np.asarray(x_gate, dtype=float))
    logits = gating_logits(post, x_gate)
    log_w = logits - logsumexp(logits, axis=1, keepdims=True)
    covs = post.covariances()
    means = post.means

    if model.kind == "gaussian":
        m = x @ means.T
        v = np.einsum("ni,kij,nj->nk", x, covs, x) + model.sigma2
        comp = -0.5 * (_LOG_2PI + np.log(v) + (y[:, None] - m) ** 2 / v)
        return logsumexp(log_w + comp, axis=1)

    rule = quad or gauss_hermite_rule(DEFAULT_QUAD_ORDER)
    log_gamma = np.log(rule.weights)

    if model.kind in ("logistic", "poisson"):
        m = x @ means.T
        s = np.sqrt(np.maximum(np.einsum("ni,kij,nj->nk", x, covs, x), 0.0))
        lin = m[:, :, None] + s[:, :, None] * rule.nodes[None, None, :]
        node_terms = _pointwise_logpmf(model.kind, y[:, None, None], lin)
        comp = logsumexp(node_terms + log_gamma[None, None, :], axis=2)
        return logsumexp(log_w + comp, axis=1)

    # unknown-variance Gaussian
    mu_b, mu_t = means[:, :-1], means[:, -1]
    s_bb = covs[:, :-1, :-1]
    s_bt = covs[:, :-1, -1]
    s_tt = covs[:, -1, -1]
    m0 = x @ mu_b.T
    a = x @ s_bt.T
    q_bb = np.einsum("ni,kij,nj->nk", x, s_bb, x)
    q_cond = np.maximum(q_bb - a**2 / s_tt[None, :], 0.0)
    root_tt = np.sqrt(s_tt)
    node_mean = m0[:, :, None] + (a / root_tt[None, :])[:, :, None] * rule.nodes[None, None, :]
    node_var = q_cond[:, :, None] + np.exp(
        mu_t[None, :, None] + root_tt[None, :, None] * rule.nodes[None, None, :]
    )
    node_terms = -0.5 * (
        _LOG_2PI + np.log(node_var) + (y[:, None, None] - node_mean) ** 2 / node_var
    )
    comp = logsumexp(node_terms + log_gamma[None, None, :], axis=2)
    return logsumexp(log_w + comp, axis=1)


def predictive_density(
    model: LikelihoodModel,
    post: MixturePosterior,
    x_row: np.ndarray,
    y_value: float,
    quad: QuadratureRule | None = None,
    x_gate_row: np.ndarray | None = None,
) -> float:
    """Predictive density (or probability mass) of a single future response."""
    gate = None if x_gate_row is None else np.atleast_2d(x_gate_row)
    out = predictive_log_density(
        model, post, np.atleast_2d(x_row), np.atleast_1d(y_value), quad, x_gate=gate
    )
    return float(np.exp(out[0]))


def log_score_sum(
    model: LikelihoodModel,
    post: MixturePosterior,
    x: np.ndarray,
    y: np.ndarray,
    quad: QuadratureRule | None = None,
    x_gate: np.ndarray | None = None,
) -> float:
    """Sum of per-observation log predictive densities, floored at log(1e-300)."""
    if len(np.atleast_1d(y)) == 0:
        raise DataError("log_score_sum needs at least one observation")
    lp = predictive_log_density(model, post, x, y, quad, x_gate=x_gate)
    return float(np.sum(np.maximum(lp, LOG_DENSITY_FLOOR)))


def pointwise_loglik(model: LikelihoodModel, x: np.ndarray, y: np.ndarray, thetas: np.ndarray) -> np.ndarray:
    """log p(y_i | theta_m) matrix of shape (n, M) for posterior draws."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    thetas = np.atleast_2d(np.asarray(thetas, dtype=float))
    model.validate_response(y)
    if model.kind == "gaussian_unknown_variance":
        lin = x @ thetas[:, :-1].T
        var = np.exp(thetas[:, -1])[None, :]
        return -0.5 * (_LOG_2PI + np.log(var) + (y[:, None] - lin) ** 2 / var)
    lin = x @ thetas.T
    if model.kind == "gaussian":
        return -0.5 * (
            np.log(2.0 * np.pi * model.sigma2) + (y[:, None] - lin) ** 2 / model.sigma2
        )
    return _pointwise_logpmf(model.kind, y[:, None], lin)
