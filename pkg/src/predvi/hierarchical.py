"""Random-effects regression (polynomial time trend + per-time and per-group
intercepts) fitted with a factorized mixture family: covariate-gated Gaussian
mixture over (trend coefficients, group intercepts) times independent local
Gaussians for the per-time effects.

The per-time stacked predictive is an exact mixture of g-dimensional
Gaussians; the regularizer is assembled term by term from closed-form
Gaussian expectations of the model's log joint.
"""

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from . import _kernels as K
from ._fitloop import run_adam_with_pruning, slice_eta_moments, slice_eta_params
from ._jax import jax, jnp
from ._rng import seed_stream
from .errors import DataError, NumericalError
from .family import MixturePosterior, mixture_weights
from .objective import FitConfig, FitResult

_LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass(frozen=True)
class HierarchicalSpec:
    n_groups: int
    sigma2_a: float
    sigma2_b: float
    sigma2_eps: float
    poly_degree: int = 3
    prior_sd: float = 100.0

    def __post_init__(self):
        if min(self.sigma2_a, self.sigma2_b, self.sigma2_eps) <= 0:
            raise ValueError("all variances must be positive")

    @property
    def n_trend(self) -> int:
        return self.poly_degree + 1

    @property
    def dim(self) -> int:
        """Dimension of the mixture block: trend coefficients + group intercepts."""
        return self.n_trend + self.n_groups


@dataclass(frozen=True)
class HierarchicalData:
    """Per-time response grid; times scaled to [0, 1], missing cells masked out."""

    times: np.ndarray
    y: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float)
        y = np.asarray(self.y, dtype=float)
        m = np.asarray(self.mask, dtype=bool)
        if y.shape != m.shape or y.shape[0] != t.shape[0]:
            raise ValueError("times, y, mask shapes disagree")
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "y", np.where(m, y, 0.0))
        object.__setattr__(self, "mask", m)

    @property
    def n_times(self) -> int:
        return len(self.times)

    @property
    def n_groups(self) -> int:
        return self.y.shape[1]

    @classmethod
    def from_long(cls, time, group, y, n_groups=None) -> "HierarchicalData":
        time = np.asarray(time, dtype=float)
        group = np.asarray(group, dtype=int)
        y = np.asarray(y, dtype=float)
        g = int(group.max()) + 1 if n_groups is None else int(n_groups)
        if (group < 0).any() or (group >= g).any():
            raise DataError("group index outside 0..n_groups-1")
        times = np.unique(time)
        grid = np.zeros((len(times), g))
        mask = np.zeros((len(times), g), dtype=bool)
        idx = np.searchsorted(times, time)
        for i, j, v in zip(idx, group, y):
            grid[i, j] = v
            mask[i, j] = True
        return cls(times=times, y=grid, mask=mask)


def poly_features(t, degree: int) -> np.ndarray:
    t = np.atleast_1d(np.asarray(t, dtype=float))
    return np.column_stack([t**d for d in range(degree + 1)])


def stacked_design(spec: HierarchicalSpec, t: float) -> np.ndarray:
    """(g, dim) design whose row j is [poly(t), e_j]."""
    p = poly_features(t, spec.poly_degree)[0]
    return np.hstack([np.tile(p, (spec.n_groups, 1)), np.eye(spec.n_groups)])


def estimate_variances_mom(data: HierarchicalData) -> tuple[float, float, float]:
    """Method-of-moments (two-way ANOVA style) estimates of the variance triple.

    Used when the spec does not fix the 'known' variances; residuals come from
    a pooled cubic trend fit; estimates are floored at 1e-6.
    """
    t_rep, g_rep, y_rep = [], [], []
    nt, g = data.y.shape
    for i in range(nt):
        for j in range(g):
            if data.mask[i, j]:
                t_rep.append(data.times[i])
                g_rep.append(j)
                y_rep.append(data.y[i, j])
    t_rep, g_rep, y_rep = map(np.asarray, (t_rep, g_rep, y_rep))
    design = poly_features(t_rep, 3)
    coef, *_ = np.linalg.lstsq(design, y_rep, rcond=None)
    resid = y_rep - design @ coef
    row_means = np.array([resid[t_rep == tv].mean() for tv in np.unique(t_rep)])
    col_means = np.array([resid[g_rep == j].mean() for j in range(g)])
    inter = resid - row_means[np.searchsorted(np.unique(t_rep), t_rep)] - col_means[g_rep]
    s2_eps = max(float(np.var(inter, ddof=1)) * nt * g / max((nt - 1) * (g - 1), 1), 1e-6)
    s2_a = max(float(np.var(row_means, ddof=1)) - s2_eps / g, 1e-6)
    s2_b = max(float(np.var(col_means, ddof=1)) - s2_eps / nt, 1e-6)
    return s2_a, s2_b, s2_eps


@dataclass(frozen=True)
class HierarchicalPosterior:
    """Mixture over (trend, group intercepts) plus local per-time factors."""

    mixture: MixturePosterior
    local_means: np.ndarray
    local_logvars: np.ndarray

    def __post_init__(self):
        lm = np.asarray(self.local_means, dtype=float)
        lv = np.asarray(self.local_logvars, dtype=float)
        if lm.shape != lv.shape or lm.ndim != 1:
            raise ValueError("local factors must be matching vectors")
        object.__setattr__(self, "local_means", lm)
        object.__setattr__(self, "local_logvars", lv)

    def to_json_dict(self) -> dict:
        return {
            "mixture": self.mixture.to_json_dict(),
            "local_means": [float(v) for v in self.local_means],
            "local_logvars": [float(v) for v in self.local_logvars],
        }


# ---------------------------------------------------------------------------
# Objective
# ---------------------------------------------------------------------------


def make_hierarchical_objective(spec: HierarchicalSpec, data: HierarchicalData, beta: float):
    """parts(params, batch_idx) for the factorized-family objective (full batch)."""
    q1 = spec.n_trend
    g = spec.n_groups
    p_feats = jnp.asarray(poly_features(data.times, spec.poly_degree))
    y = jnp.asarray(data.y)
    mask = jnp.asarray(data.mask, dtype=jnp.float64)
    n_obs = float(data.mask.sum())
    eye_g = jnp.eye(g)
    s2a, s2b, s2e = spec.sigma2_a, spec.sigma2_b, spec.sigma2_eps
    pred_noise = s2e + s2a
    prior_tau2 = spec.prior_sd**2

    def parts(params, batch_idx=None):
        means = params["means"]
        chols = K.chol_from_raw(params["raw"])
        covs = chols @ jnp.swapaxes(chols, -1, -2)
        local_m = params["local_m"]
        local_v = jnp.exp(params["local_logv"])

        mu_beta = means[:, :q1]
        mu_b = means[:, q1:]
        s_bb = covs[:, :q1, :q1]
        s_bg = covs[:, :q1, q1:]
        s_gg = covs[:, q1:, q1:]

        log_w = K.gating_log_weights(params["eta"], p_feats)

        # per-time stacked predictive: mean (nt,K,g) and covariance pieces
        trend = p_feats @ mu_beta.T  # (nt, K)
        mean_grid = trend[:, :, None] + mu_b[None, :, :]  # (nt, K, g)
        s_scalar = jnp.einsum("ni,kij,nj->nk", p_feats, s_bb, p_feats)  # P Sbb P^T
        v_cross = jnp.einsum("ni,kij->nkj", p_feats, s_bg)  # P Sbg -> (nt,K,g)

        def stack_logpdf(y_row, m_row, mean_k, s_k, v_k, sgg_k):
            cov = (
                s_k
                + v_k[:, None]
                + v_k[None, :]
                + sgg_k
                + pred_noise * eye_g
            )
            mcov = cov * jnp.outer(m_row, m_row) + jnp.diag(1.0 - m_row)
            chol = jnp.linalg.cholesky(mcov)
            r = m_row * (y_row - mean_k)
            z = jax.scipy.linalg.solve_triangular(chol, r, lower=True)
            g_obs = jnp.sum(m_row)
            return -0.5 * g_obs * _LOG_2PI - jnp.sum(jnp.log(jnp.diagonal(chol))) - 0.5 * jnp.sum(z * z)

        def time_logpdfs(y_row, m_row, means_row, s_row, v_row):
            return jax.vmap(
                lambda mk, sk, vk, sgg: stack_logpdf(y_row, m_row, mk, sk, vk, sgg)
            )(means_row, s_row, v_row, s_gg)

        comp_lp = jax.vmap(time_logpdfs)(y, mask, mean_grid, s_scalar, v_cross)  # (nt,K)
        lp_rows = jax.scipy.special.logsumexp(log_w + comp_lp, axis=1)
        floor_hits = jnp.sum(lp_rows < K.DENSITY_FLOOR_LOG)
        score = jnp.sum(jnp.maximum(lp_rows, K.DENSITY_FLOOR_LOG))

        # regularizer
        wbar = jnp.mean(jnp.exp(log_w), axis=0)
        cell_var = (
            s_scalar[:, :, None]
            + 2.0 * v_cross
            + jnp.diagonal(s_gg, axis1=1, axis2=2)[None, :, :]
        )  # (nt, K, g): u_ij^T Sigma_k u_ij
        resid = y[:, None, :] - mean_grid - local_m[:, None, None]
        cell_terms = resid**2 + cell_var + local_v[:, None, None]
        ell = -0.5 * n_obs * jnp.log(2.0 * jnp.pi * s2e) - 0.5 / s2e * jnp.einsum(
            "ikj,ij->k", cell_terms, mask
        )
        elp_beta = jax.vmap(
            lambda m, c: K.expected_log_prior_isotropic(m[:q1], c[:q1, :q1], prior_tau2)
        )(means, covs)
        elp_b = jax.vmap(
            lambda m, c: K.expected_log_prior_isotropic(m[q1:], c[q1:, q1:], s2b)
        )(means, covs)
        elp_a = jnp.sum(
            -0.5 * jnp.log(2.0 * jnp.pi * s2a) - (local_m**2 + local_v) / (2.0 * s2a)
        )
        entropy_mix = K.entropy_lower_bound_dense(wbar, means, covs)
        entropy_local = jnp.sum(0.5 * (jnp.log(2.0 * jnp.pi) + 1.0 + params["local_logv"]))
        reg = jnp.dot(wbar, ell + elp_beta + elp_b) + elp_a + entropy_mix + entropy_local
        return score + beta * reg, (score, reg, floor_hits)

    return parts


def _params_from_posterior(post: HierarchicalPosterior) -> dict:
    return {
        "eta": jnp.asarray(post.mixture.eta),
        "means": jnp.asarray(post.mixture.means),
        "raw": jnp.asarray(post.mixture.chol_raw),
        "local_m": jnp.asarray(post.local_means),
        "local_logv": jnp.asarray(post.local_logvars),
    }


def _posterior_from_params(params: dict) -> HierarchicalPosterior:
    return HierarchicalPosterior(
        mixture=MixturePosterior(
            means=np.asarray(params["means"]),
            chol_raw=np.asarray(params["raw"]),
            eta=np.asarray(params["eta"]),
        ),
        local_means=np.asarray(params["local_m"]),
        local_logvars=np.asarray(params["local_logv"]),
    )


def hierarchical_objective(
    spec: HierarchicalSpec,
    post: HierarchicalPosterior,
    data: HierarchicalData,
    beta: float,
    return_parts: bool = False,
):
    parts = make_hierarchical_objective(spec, data, beta)
    value, (score, reg, _) = parts(_params_from_posterior(post))
    if return_parts:
        return float(value), float(score), float(reg)
    return float(value)


def hierarchical_gradient(spec, post, data, beta) -> dict:
    parts = make_hierarchical_objective(spec, data, beta)
    grad = jax.grad(lambda p: parts(p)[0])(_params_from_posterior(post))
    out = {k: np.asarray(v) for k, v in grad.items()}
    if not all(np.isfinite(v).all() for v in out.values()):
        raise NumericalError("non-finite gradient")
    return out


# ---------------------------------------------------------------------------
# Predictive and clustering
# ---------------------------------------------------------------------------


def hierarchical_predictive(spec: HierarchicalSpec, post: HierarchicalPosterior, t: float):
    """Mixture of g-dimensional Gaussians at time t: (weights, means, covariances)."""
    if not (0.0 <= t <= 1.0):
        warnings.warn(f"time {t} outside [0, 1]; extrapolating")
    design = stacked_design(spec, t)
    gate = poly_features(t, spec.poly_degree)[0]
    w = mixture_weights(post.mixture, gate)
    covs = post.mixture.covariances()
    means = np.stack([design @ mu for mu in post.mixture.means])
    noise = (spec.sigma2_eps + spec.sigma2_a) * np.eye(spec.n_groups)
    sigmas = np.stack([design @ c @ design.T + noise for c in covs])
    return w, means, sigmas


def hierarchical_predictive_logpdf(spec, post, t: float, y_vec: np.ndarray) -> float:
    """log q(y | t) of a full g-vector of responses."""
    w, means, sigmas = hierarchical_predictive(spec, post, t)
    comp = np.empty(len(w))
    for k in range(len(w)):
        chol = np.linalg.cholesky(sigmas[k])
        z = np.linalg.solve(chol, y_vec - means[k])
        comp[k] = -0.5 * (
            spec.n_groups * _LOG_2PI + 2 * np.sum(np.log(np.diag(chol))) + z @ z
        )
    return float(logsumexp(comp + np.log(np.maximum(w, 1e-300))))


def cluster_map(post: HierarchicalPosterior, times, poly_degree: int = 3) -> np.ndarray:
    """Dominant component index per time; ties to the lowest index."""
    feats = poly_features(times, poly_degree)
    w = np.atleast_2d(mixture_weights(post.mixture, feats))
    return np.argmax(w, axis=1)


# ---------------------------------------------------------------------------
# Fit
# ---------------------------------------------------------------------------


def hierarchical_fit(
    spec: HierarchicalSpec,
    data: HierarchicalData,
    beta: float,
    fit_cfg: FitConfig,
) -> FitResult:
    if data.n_groups != spec.n_groups:
        raise DataError("data group count does not match spec")
    parts = make_hierarchical_objective(spec, data, beta)
    rng = seed_stream(fit_cfg.seed, "init")
    k = fit_cfg.n_components
    d = spec.dim
    nt = data.n_times

    params = None
    for _ in range(10):
        raw = np.zeros((k, d, d))
        raw[:, np.arange(d), np.arange(d)] = fit_cfg.init_diag
        candidate = {
            "eta": jnp.asarray(fit_cfg.init_eta_scale * rng.standard_normal((k - 1, spec.n_trend))),
            "means": jnp.asarray(fit_cfg.init_mean_scale * rng.standard_normal((k, d))),
            "raw": jnp.asarray(raw),
            "local_m": jnp.asarray(np.zeros(nt)),
            "local_logv": jnp.asarray(np.full(nt, 2.0 * fit_cfg.init_diag)),
        }
        if np.isfinite(float(parts(candidate)[0])):
            params = candidate
            break
    if params is None:
        raise NumericalError("objective non-finite at initialization after 10 re-draws")

    p_feats = poly_features(data.times, spec.poly_degree)

    def slice_params(ps, keep):
        keep = np.asarray(keep)
        return {
            "eta": slice_eta_params(np.asarray(ps["eta"]), keep),
            "means": ps["means"][keep],
            "raw": ps["raw"][keep],
            "local_m": ps["local_m"],
            "local_logv": ps["local_logv"],
        }

    def slice_moments(tree, keep):
        keep = np.asarray(keep)
        return {
            "eta": slice_eta_moments(tree["eta"], keep),
            "means": tree["means"][keep],
            "raw": tree["raw"][keep],
            "local_m": tree["local_m"],
            "local_logv": tree["local_logv"],
        }

    params, acc, pruned_history, converged = run_adam_with_pruning(
        lambda: (lambda p, idx: parts(p, None)),
        params,
        fit_cfg,
        n_components_of=lambda p: int(p["means"].shape[0]),
        weights_fn=lambda p: mixture_weights(
            _posterior_from_params(p).mixture, p_feats
        ),
        slice_params_fn=slice_params,
        slice_moments_fn=slice_moments,
    )

    obj, score, reg, ks = acc.arrays()
    return FitResult(
        posterior=_posterior_from_params(params),
        objective_trace=obj,
        score_trace=score,
        regularizer_trace=reg,
        k_trace=ks,
        pruned_history=pruned_history,
        beta=beta,
        converged=converged,
        floor_hits=acc.floor,
    )
