"""Shared test utilities: random instances and Monte Carlo oracles.

The MC oracles here are deliberately naive (loop/draw/average) so they stay
independent of the vectorized closed forms they check.
"""

import numpy as np
from scipy.special import expit, gammaln

from predvi.family import MixturePosterior, mixture_weights


def random_spd(rng, p, scale=1.0):
    a = rng.standard_normal((p, p))
    return scale * (a @ a.T + p * np.eye(p))


def random_posterior(rng, n_components, dim, gating_dim, mean_scale=0.7, cov_scale=0.5):
    means = mean_scale * rng.standard_normal((n_components, dim))
    raw = np.zeros((n_components, dim, dim))
    for k in range(n_components):
        raw[k] = np.tril(0.2 * rng.standard_normal((dim, dim)), k=-1)
        raw[k][np.diag_indices(dim)] = np.log(cov_scale) + 0.3 * rng.standard_normal(dim)
    eta = 0.5 * rng.standard_normal((n_components - 1, gating_dim))
    return MixturePosterior(means=means, chol_raw=raw, eta=eta)


def sample_component(rng, mean, cov, size):
    chol = np.linalg.cholesky(cov)
    return mean + rng.standard_normal((size, len(mean))) @ chol.T


def sample_conditional_mixture(rng, post, x_gate, size):
    """Draws from q(theta | x_gate) by explicit per-draw component selection."""
    w = mixture_weights(post, x_gate)
    covs = post.covariances()
    comps = rng.choice(post.n_components, size=size, p=w)
    out = np.empty((size, post.dim))
    for k in range(post.n_components):
        mask = comps == k
        if mask.any():
            out[mask] = sample_component(rng, post.means[k], covs[k], int(mask.sum()))
    return out


def density_given_theta(kind, x_row, y_value, thetas, sigma2=None):
    """p(y | x, theta) for each draw; unknown-variance uses theta = (beta, log sigma^2)."""
    if kind == "gaussian_unknown_variance":
        lin = thetas[:, :-1] @ x_row
        var = np.exp(thetas[:, -1])
        return np.exp(-0.5 * (np.log(2 * np.pi * var) + (y_value - lin) ** 2 / var))
    lin = thetas @ x_row
    if kind == "gaussian":
        return np.exp(
            -0.5 * (np.log(2 * np.pi * sigma2) + (y_value - lin) ** 2 / sigma2)
        )
    if kind == "logistic":
        prob = expit(lin)
        return prob if y_value == 1 else 1.0 - prob
    if kind == "poisson":
        return np.exp(y_value * lin - np.exp(lin) - gammaln(y_value + 1.0))
    raise ValueError(kind)


def loglik_given_theta(kind, x, y, theta, sigma2=None):
    """Sum_i log p(y_i | x_i, theta) at a single parameter draw."""
    if kind == "gaussian_unknown_variance":
        lin = x @ theta[:-1]
        var = np.exp(theta[-1])
        return np.sum(-0.5 * (np.log(2 * np.pi * var) + (y - lin) ** 2 / var))
    lin = x @ theta
    if kind == "gaussian":
        return np.sum(-0.5 * (np.log(2 * np.pi * sigma2) + (y - lin) ** 2 / sigma2))
    if kind == "logistic":
        return np.sum(y * np.log(expit(lin)) + (1 - y) * np.log(expit(-lin)))
    if kind == "poisson":
        return np.sum(y * lin - np.exp(lin) - gammaln(y + 1.0))
    raise ValueError(kind)


def mc_mean_and_se(values):
    values = np.asarray(values, dtype=float)
    return values.mean(), values.std(ddof=1) / np.sqrt(len(values))


def make_glm_instance(rng, kind, n=25, p=3):
    """Small random design/response pair consistent with the likelihood kind."""
    x = np.column_stack([np.ones(n), rng.standard_normal((n, p - 1))])
    theta_true = 0.5 * rng.standard_normal(p)
    lin = x @ theta_true
    if kind == "gaussian" or kind == "gaussian_unknown_variance":
        y = lin + 0.4 * rng.standard_normal(n)
    elif kind == "logistic":
        y = (rng.uniform(size=n) < expit(lin)).astype(float)
    elif kind == "poisson":
        y = rng.poisson(np.exp(np.clip(lin, -5, 3))).astype(float)
    else:
        raise ValueError(kind)
    return x, y
