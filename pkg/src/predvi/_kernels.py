"""Differentiable numerical kernels shared by the objective, models, and fits.

Everything here is a pure jnp function of raw arrays, suitable for jit/grad.
Public numpy-facing wrappers live in the topic modules. The GLM score paths
are written for a single-core CPU budget: node tensors are built once and
shared between the score and the expected log-likelihood, transcendental
counts are kept minimal, and inner quadrature sums run in density space
(safe because GLM node likelihoods are probability masses <= 1).
"""

import jax.scipy.linalg as jsl
import jax.scipy.special as jss

from ._jax import jax, jnp

LOG_2PI = float(jnp.log(2.0 * jnp.pi))
DENSITY_FLOOR_LOG = float(jnp.log(1e-300))
POISSON_LINPRED_CLIP = 30.0


def softplus(z):
    """log(1 + e^z) with two transcendentals; stable for large |z|."""
    return jnp.maximum(z, 0.0) + jnp.log1p(jnp.exp(-jnp.abs(z)))


def chol_from_raw(raw):
    """Raw lower-triangular (log diagonal) -> Cholesky factor, batched."""
    lower = jnp.tril(raw, k=-1)
    d = jnp.exp(jnp.diagonal(raw, axis1=-2, axis2=-1))
    eye = jnp.eye(raw.shape[-1], dtype=raw.dtype)
    return lower + d[..., :, None] * eye


def covs_from_raw(raw):
    c = chol_from_raw(raw)
    return c @ jnp.swapaxes(c, -1, -2)


def gating_log_weights(eta, x_gate):
    """Log mixing weights (n, K); first component carries the zero logit."""
    n = x_gate.shape[0]
    free = x_gate @ eta.T if eta.shape[0] else jnp.zeros((n, 0))
    logits = jnp.concatenate([jnp.zeros((n, 1)), free], axis=1)
    return jax.nn.log_softmax(logits, axis=1)


def mvn_logpdf_chol(x, mean, chol):
    """log phi(x; mean, L L^T) for a single point and lower-triangular L."""
    z = jsl.solve_triangular(chol, x - mean, lower=True)
    logdet = 2.0 * jnp.sum(jnp.log(jnp.diagonal(chol)))
    return -0.5 * (x.shape[-1] * LOG_2PI + logdet + jnp.sum(z * z))


def normal_logpdf(y, mean, var):
    return -0.5 * (LOG_2PI + jnp.log(var) + (y - mean) ** 2 / var)


def bernoulli_logpmf(y, linpred):
    """Needs y in {0,1}: one softplus instead of two."""
    return -softplus((1.0 - 2.0 * y) * linpred)


def poisson_logpmf_raw(y, linpred):
    """Poisson log pmf WITHOUT the -lgamma(y+1) term (add it once per row)."""
    lin = jnp.clip(linpred, -POISSON_LINPRED_CLIP, POISSON_LINPRED_CLIP)
    return y * lin - jnp.exp(lin)


def quad_forms(x, covs):
    """x_i^T Sigma_k x_i for all rows and components -> (n, K)."""
    return jnp.einsum("ni,kij,nj->nk", x, covs, x)


def glm_node_linpreds(x, means, covs, nodes):
    """Linear-predictor values x^T mu_k + w_b sqrt(x^T Sigma_k x) -> (n, K, B)."""
    m = x @ means.T
    s = jnp.sqrt(jnp.maximum(quad_forms(x, covs), 0.0))
    return m[:, :, None] + s[:, :, None] * nodes[None, None, :]


# ---------------------------------------------------------------------------
# Score rows + expected log-likelihoods, per likelihood kind
# ---------------------------------------------------------------------------


def glm_quadrature_score_and_ell(kind, x, y, means, covs, log_w, nodes, quad_w):
    """Fused logistic/Poisson path sharing one (n, K, B) node tensor.

    Returns (lp_rows, ell) where lp_rows[i] = log sum_k w_k(x_i) I_ik (plus the
    per-row pmf constant) and ell[k] = E_{phi_k}[log p(y | theta)].
    """
    lin = glm_node_linpreds(x, means, covs, nodes)
    if kind == "logistic":
        node_ll = bernoulli_logpmf(y[:, None, None], lin)
        row_const = jnp.zeros_like(y)
    else:
        node_ll = poisson_logpmf_raw(y[:, None, None], lin)
        row_const = -jss.gammaln(y + 1.0)
    inner = jnp.exp(node_ll) @ quad_w  # (n, K), each entry <= 1
    dens = jnp.sum(jnp.exp(log_w) * inner, axis=1)
    lp_rows = jnp.log(jnp.maximum(dens, 1e-300)) + row_const

    if kind == "logistic":
        ell = jnp.einsum("nkb,b->k", node_ll, quad_w)
    else:
        # Poisson expected log-likelihood is closed form (lognormal mean)
        lin0 = x @ means.T
        q = quad_forms(x, covs)
        rate_log = jnp.clip(lin0 + 0.5 * q, -POISSON_LINPRED_CLIP, POISSON_LINPRED_CLIP)
        ell = jnp.sum(y[:, None] * lin0 - jnp.exp(rate_log), axis=0) + jnp.sum(row_const)
    return lp_rows, ell


def gaussian_score_rows(x, y, means, covs, sigma2, log_w):
    """Exact mixture-of-Gaussians predictive log density rows."""
    m = x @ means.T
    v = quad_forms(x, covs) + sigma2
    comp = normal_logpdf(y[:, None], m, v)
    return jss.logsumexp(log_w + comp, axis=1)


def gaussian_ell(x, y, means, covs, sigma2):
    """E_{phi_k}[log p(y|theta)] for the fixed-variance Gaussian, all components."""
    n = x.shape[0]
    resid = y[:, None] - x @ means.T
    q = quad_forms(x, covs)
    return -0.5 * n * jnp.log(2.0 * jnp.pi * sigma2) - 0.5 / sigma2 * jnp.sum(
        resid**2 + q, axis=0
    )


def unknown_variance_blocks(means, covs):
    mu_b = means[:, :-1]
    mu_t = means[:, -1]
    s_bb = covs[:, :-1, :-1]
    s_bt = covs[:, :-1, -1]
    s_tt = covs[:, -1, -1]
    return mu_b, mu_t, s_bb, s_bt, s_tt


def gaussian_unknown_score_rows(x, y, means, covs, log_w, nodes, log_gamma):
    """Per-component Gauss-Hermite over tau = log sigma^2, conditional Gaussian in beta."""
    mu_b, mu_t, s_bb, s_bt, s_tt = unknown_variance_blocks(means, covs)
    m0 = x @ mu_b.T
    a = x @ s_bt.T
    q_bb = quad_forms(x, s_bb)
    q_cond = jnp.maximum(q_bb - a**2 / s_tt[None, :], 0.0)
    root_tt = jnp.sqrt(s_tt)
    node_mean = m0[:, :, None] + (a / root_tt[None, :])[:, :, None] * nodes[None, None, :]
    node_var = q_cond[:, :, None] + jnp.exp(
        mu_t[None, :, None] + root_tt[None, :, None] * nodes[None, None, :]
    )
    node_terms = normal_logpdf(y[:, None, None], node_mean, node_var) + log_gamma[None, None, :]
    comp = jss.logsumexp(node_terms, axis=2)
    return jss.logsumexp(log_w + comp, axis=1)


def gaussian_unknown_ell(x, y, means, covs):
    """Closed-form expected Gaussian log-likelihood with theta = (beta, log sigma^2)."""
    mu_b, mu_t, s_bb, s_bt, s_tt = unknown_variance_blocks(means, covs)
    n = x.shape[0]
    resid = y[:, None] - x @ (mu_b - s_bt).T
    q = quad_forms(x, s_bb)
    return (
        -0.5 * n * LOG_2PI
        - 0.5 * n * mu_t
        - 0.5 * jnp.exp(-mu_t + 0.5 * s_tt) * jnp.sum(resid**2 + q, axis=0)
    )


def glm_score_and_ell(kind, x, y, means, covs, log_w, nodes, quad_w, log_gamma, sigma2):
    """(per-row log predictive, per-component expected log-lik) for any GLM kind."""
    if kind == "gaussian":
        return gaussian_score_rows(x, y, means, covs, sigma2, log_w), gaussian_ell(
            x, y, means, covs, sigma2
        )
    if kind in ("logistic", "poisson"):
        return glm_quadrature_score_and_ell(kind, x, y, means, covs, log_w, nodes, quad_w)
    if kind == "gaussian_unknown_variance":
        return gaussian_unknown_score_rows(
            x, y, means, covs, log_w, nodes, log_gamma
        ), gaussian_unknown_ell(x, y, means, covs)
    raise ValueError(f"unknown likelihood kind {kind!r}")


# ---------------------------------------------------------------------------
# Expected log-priors under a single Gaussian component
# ---------------------------------------------------------------------------


def expected_log_prior_isotropic(mean, cov, tau2):
    p = mean.shape[0]
    return -0.5 * p * jnp.log(2.0 * jnp.pi * tau2) - 0.5 / tau2 * (
        jnp.dot(mean, mean) + jnp.trace(cov)
    )


def expected_log_prior_general(mean, chol_comp, omega_chol):
    """E[log N(theta; 0, Omega)] with Sigma = chol_comp chol_comp^T."""
    p = mean.shape[0]
    half_logdet = jnp.sum(jnp.log(jnp.diagonal(omega_chol)))
    zm = jsl.solve_triangular(omega_chol, mean, lower=True)
    zc = jsl.solve_triangular(omega_chol, chol_comp, lower=True)
    return -0.5 * p * LOG_2PI - half_logdet - 0.5 * (jnp.dot(zm, zm) + jnp.sum(zc * zc))


# ---------------------------------------------------------------------------
# Mixture entropy lower bound (pairwise-density form)
# ---------------------------------------------------------------------------


def entropy_lower_bound_dense(weights, means, covs):
    """Lower bound on mixture differential entropy from pairwise merged Gaussians."""

    def pair_logpdf(mu_k, cov_k):
        def inner(mu_l, cov_l):
            merged = cov_k + cov_l
            chol = jnp.linalg.cholesky(merged)
            return mvn_logpdf_chol(mu_k, mu_l, chol)

        return jax.vmap(inner)(means, covs)

    pairwise = jax.vmap(pair_logpdf)(means, covs)
    log_w = jnp.log(weights)
    inner_ls = jss.logsumexp(log_w[None, :] + pairwise, axis=1)
    return -jnp.sum(jnp.where(weights > 0.0, weights * inner_ls, 0.0))


def entropy_lower_bound_diag(weights, means, variances):
    """Same bound for diagonal-covariance components (GP inducing posteriors)."""
    merged = variances[:, None, :] + variances[None, :, :]
    diff = means[:, None, :] - means[None, :, :]
    pairwise = -0.5 * jnp.sum(LOG_2PI + jnp.log(merged) + diff**2 / merged, axis=2)
    log_w = jnp.log(weights)
    inner_ls = jss.logsumexp(log_w[None, :] + pairwise, axis=1)
    return -jnp.sum(jnp.where(weights > 0.0, weights * inner_ls, 0.0))
