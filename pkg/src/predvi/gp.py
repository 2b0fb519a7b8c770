"""Latent Gaussian-process regression with inducing points and a
covariate-gated mixture posterior over the inducing values.

Component covariances are diagonal; each component carries its own point-mass
noise variance, so predictive uncertainty can switch across covariate regions
through the gating. Kernel hyperparameters are fixed (configurable, not
learned).
"""

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp
from scipy.stats import norm

from . import _kernels as K
from ._fitloop import run_adam_with_pruning, slice_eta_moments, slice_eta_params
from ._jax import jax, jnp
from ._rng import seed_stream
from .errors import NumericalError
from .objective import FitConfig, FitResult

_LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass(frozen=True)
class KernelSpec:
    length_scale: float = 0.3
    signal_var: float = 1.0
    jitter: float = 1e-8

    def __post_init__(self):
        if self.length_scale <= 0 or self.signal_var <= 0:
            raise ValueError("kernel hyperparameters must be positive")

    def matrix(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        a = np.atleast_2d(np.asarray(a, dtype=float))
        b = np.atleast_2d(np.asarray(b, dtype=float))
        if a.ndim == 2 and a.shape[1] != b.shape[1]:
            raise ValueError("kernel inputs must share feature dimension")
        d2 = np.sum((a[:, None, :] - b[None, :, :]) ** 2, axis=2)
        return self.signal_var * np.exp(-0.5 * d2 / self.length_scale**2)


@dataclass(frozen=True)
class InducingPosterior:
    """Mixture over inducing values: diagonal covariances, per-component noise."""

    z: np.ndarray
    means: np.ndarray
    log_diag: np.ndarray
    log_noise: np.ndarray
    eta: np.ndarray

    def __post_init__(self):
        z = np.atleast_2d(np.asarray(self.z, dtype=float))
        means = np.asarray(self.means, dtype=float)
        ld = np.asarray(self.log_diag, dtype=float)
        ln = np.asarray(self.log_noise, dtype=float)
        eta = np.asarray(self.eta, dtype=float)
        k, m = means.shape
        if z.shape[0] != m or ld.shape != (k, m) or ln.shape != (k,) or eta.shape[0] != k - 1:
            raise ValueError("inconsistent inducing-posterior shapes")
        object.__setattr__(self, "z", z)
        object.__setattr__(self, "means", means)
        object.__setattr__(self, "log_diag", ld)
        object.__setattr__(self, "log_noise", ln)
        object.__setattr__(self, "eta", eta)

    @property
    def n_components(self) -> int:
        return self.means.shape[0]

    @property
    def n_inducing(self) -> int:
        return self.means.shape[1]

    def noise_variances(self) -> np.ndarray:
        return np.exp(self.log_noise)

    def to_json_dict(self) -> dict:
        return {
            "K": int(self.n_components),
            "m": int(self.n_inducing),
            "z": [[float(v) for v in row] for row in self.z],
            "means": [[float(v) for v in row] for row in self.means],
            "log_diag": [[float(v) for v in row] for row in self.log_diag],
            "log_noise": [float(v) for v in self.log_noise],
            "eta": [[float(v) for v in row] for row in self.eta],
        }


@dataclass(frozen=True)
class GpProjection:
    """Conditional-prior projection: A = Kxz Kzz^-1, C = Kxx - A Kzx."""

    a: np.ndarray
    c: np.ndarray


def gate_features(x: np.ndarray) -> np.ndarray:
    """Gating covariates for prediction inputs: intercept plus the raw inputs."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    return np.column_stack([np.ones(x.shape[0]), x])


def _chol_kzz(kernel: KernelSpec, z: np.ndarray) -> np.ndarray:
    kzz = kernel.matrix(z, z) + kernel.jitter * np.eye(len(z))
    try:
        return np.linalg.cholesky(kzz)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"inducing kernel matrix not SPD after jitter: {exc}") from exc


def gp_projection(kernel: KernelSpec, x: np.ndarray, z: np.ndarray) -> GpProjection:
    chol = _chol_kzz(kernel, z)
    kxz = kernel.matrix(x, z)
    a = np.linalg.solve(chol.T, np.linalg.solve(chol, kxz.T)).T
    c = kernel.matrix(x, x) - a @ kxz.T
    return GpProjection(a=a, c=c)


def _gating_weights(post: InducingPosterior, gate_rows: np.ndarray) -> np.ndarray:
    logits = np.concatenate(
        [np.zeros((gate_rows.shape[0], 1)), gate_rows @ post.eta.T], axis=1
    )
    logits -= logits.max(axis=1, keepdims=True)
    w = np.exp(logits)
    return w / w.sum(axis=1, keepdims=True)


def gp_marginal(post: InducingPosterior, kernel: KernelSpec, x: np.ndarray):
    """Mixture marginal of the latent values at rows of x.

    Returns (weights, alphas, omegas): per-component means A mu_k and
    covariances C + A Sigma_k A^T, with weights averaged over the gating at x.
    """
    proj = gp_projection(kernel, x, post.z)
    alphas = post.means @ proj.a.T
    omegas = np.stack(
        [proj.c + (proj.a * np.exp(post.log_diag[k])) @ proj.a.T for k in range(post.n_components)]
    )
    weights = _gating_weights(post, gate_features(x)).mean(axis=0)
    return weights, alphas, omegas


def gp_predictive_moments(post: InducingPosterior, kernel: KernelSpec, x: np.ndarray):
    """Per-row mixture weights, means, and total variances (latent + noise)."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    chol = _chol_kzz(kernel, post.z)
    kxz = kernel.matrix(x, post.z)
    a = np.linalg.solve(chol.T, np.linalg.solve(chol, kxz.T)).T
    c_diag = np.maximum(kernel.signal_var - np.sum(a * kxz, axis=1), 0.0)
    means = a @ post.means.T
    lat_var = c_diag[:, None] + a**2 @ np.exp(post.log_diag).T
    total_var = lat_var + post.noise_variances()[None, :]
    weights = _gating_weights(post, gate_features(x))
    return weights, means, total_var


def gp_predictive_log_density(
    post: InducingPosterior, kernel: KernelSpec, x: np.ndarray, y: np.ndarray
) -> np.ndarray:
    weights, means, total_var = gp_predictive_moments(post, kernel, x)
    y = np.atleast_1d(np.asarray(y, dtype=float))
    comp = -0.5 * (_LOG_2PI + np.log(total_var) + (y[:, None] - means) ** 2 / total_var)
    return logsumexp(comp + np.log(np.maximum(weights, 1e-300)), axis=1)


def gp_predictive(post: InducingPosterior, kernel: KernelSpec, x_new, y_new) -> float:
    """Predictive density of a single future response."""
    out = gp_predictive_log_density(post, kernel, np.atleast_2d(x_new), np.atleast_1d(y_new))
    return float(np.exp(out[0]))


def gp_predictive_mean(post: InducingPosterior, kernel: KernelSpec, x: np.ndarray) -> np.ndarray:
    weights, means, _ = gp_predictive_moments(post, kernel, x)
    return np.sum(weights * means, axis=1)


def gp_predictive_quantiles(
    post: InducingPosterior,
    kernel: KernelSpec,
    x: np.ndarray,
    levels=(0.01, 0.05, 0.25, 0.5, 0.75, 0.95, 0.99),
) -> np.ndarray:
    """Mixture quantiles by bisection on the mixture normal CDF; (n, len(levels))."""
    weights, means, total_var = gp_predictive_moments(post, kernel, x)
    sds = np.sqrt(total_var)
    lo = (means - 10 * sds).min(axis=1)
    hi = (means + 10 * sds).max(axis=1)
    out = np.empty((x.shape[0] if x.ndim > 1 else len(np.atleast_2d(x)), len(levels)))
    for j, level in enumerate(levels):
        a, b = lo.copy(), hi.copy()
        for _ in range(80):
            mid = 0.5 * (a + b)
            cdf = np.sum(weights * norm.cdf((mid[:, None] - means) / sds), axis=1)
            below = cdf < level
            a = np.where(below, mid, a)
            b = np.where(below, b, mid)
        out[:, j] = 0.5 * (a + b)
    return out


# ---------------------------------------------------------------------------
# Objective and fit
# ---------------------------------------------------------------------------


def make_gp_objective(
    kernel: KernelSpec,
    x: np.ndarray,
    y: np.ndarray,
    z: np.ndarray,
    beta: float,
    fixed_log_noise: np.ndarray | None = None,
):
    """parts(params) for the inducing-point mixture objective.

    params: eta (K-1, gdim), means_w (K, m) whitened means (mu = L_zz u, so the
    prior quadratic is ||u||^2 and optimization stays well-conditioned for
    smooth kernels), log_diag (K, m) in the original f-space, and log_noise
    (K,) unless a fixed noise vector is supplied.
    """
    chol = _chol_kzz(kernel, z)
    kxz = kernel.matrix(x, z)
    a_mat = np.linalg.solve(chol.T, np.linalg.solve(chol, kxz.T)).T
    c_diag = np.maximum(kernel.signal_var - np.sum(a_mat * kxz, axis=1), 0.0)
    kzz_inv = np.linalg.solve(chol.T, np.linalg.solve(chol, np.eye(len(z))))
    gate = gate_features(x)

    alj = jnp.asarray(a_mat @ chol)  # maps whitened means to f-space rows
    a2j = jnp.asarray(a_mat**2)
    cj = jnp.asarray(c_diag)
    yj = jnp.asarray(y, dtype=jnp.float64)
    gj = jnp.asarray(gate)
    lzz_t = jnp.asarray(chol.T)
    kzz_inv_diag = jnp.asarray(np.diag(kzz_inv))
    half_logdet = float(np.sum(np.log(np.diag(chol))))
    m = len(z)
    n = len(y)

    def parts(params, batch_idx=None):
        u = params["means_w"]
        diag = jnp.exp(params["log_diag"])
        if fixed_log_noise is None:
            log_noise = params["log_noise"]
        else:
            log_noise = jnp.broadcast_to(
                jnp.atleast_1d(jnp.asarray(fixed_log_noise)), (u.shape[0],)
            )
        noise = jnp.exp(log_noise)

        log_w = K.gating_log_weights(params["eta"], gj)
        f_mean = alj @ u.T  # (n, K): A (L u) per component
        f_var = cj[:, None] + a2j @ diag.T  # (n, K)
        total_var = f_var + noise[None, :]
        comp_lp = -0.5 * (_LOG_2PI + jnp.log(total_var) + (yj[:, None] - f_mean) ** 2 / total_var)
        lp_rows = jax.scipy.special.logsumexp(log_w + comp_lp, axis=1)
        floor_hits = jnp.sum(lp_rows < K.DENSITY_FLOOR_LOG)
        score = jnp.sum(jnp.maximum(lp_rows, K.DENSITY_FLOOR_LOG))

        wbar = jnp.mean(jnp.exp(log_w), axis=0)
        ell = (
            -0.5 * n * (_LOG_2PI + log_noise)
            - 0.5 * jnp.sum((yj[:, None] - f_mean) ** 2 + f_var, axis=0) / noise
        )
        elp = (
            -0.5 * m * _LOG_2PI
            - half_logdet
            - 0.5 * (jnp.sum(u**2, axis=1) + diag @ kzz_inv_diag)
        )
        mu = u @ lzz_t  # f-space means for the entropy pairwise terms
        entropy = K.entropy_lower_bound_diag(wbar, mu, diag)
        reg = jnp.dot(wbar, ell + elp) + entropy
        return score + beta * reg, (score, reg, floor_hits)

    return parts


def whiten_means(kernel: KernelSpec, z: np.ndarray, means: np.ndarray) -> np.ndarray:
    """u = L_zz^-1 mu rows; inverse of the mu = L_zz u parameterization."""
    chol = _chol_kzz(kernel, z)
    return np.linalg.solve(chol, np.asarray(means).T).T


def unwhiten_means(kernel: KernelSpec, z: np.ndarray, u: np.ndarray) -> np.ndarray:
    chol = _chol_kzz(kernel, z)
    return (chol @ np.asarray(u).T).T


def _params_from_posterior(post: InducingPosterior, kernel, learn_noise: bool) -> dict:
    params = {
        "eta": jnp.asarray(post.eta),
        "means_w": jnp.asarray(whiten_means(kernel, post.z, post.means)),
        "log_diag": jnp.asarray(post.log_diag),
    }
    if learn_noise:
        params["log_noise"] = jnp.asarray(post.log_noise)
    return params


def _posterior_from_params(params: dict, kernel, z, fixed_log_noise=None) -> InducingPosterior:
    k = params["means_w"].shape[0]
    if "log_noise" in params:
        log_noise = np.asarray(params["log_noise"])
    else:
        log_noise = np.broadcast_to(np.asarray(fixed_log_noise), (k,)).copy()
    return InducingPosterior(
        z=np.asarray(z),
        means=unwhiten_means(kernel, z, np.asarray(params["means_w"])),
        log_diag=np.asarray(params["log_diag"]),
        log_noise=log_noise,
        eta=np.asarray(params["eta"]),
    )


def gp_objective(post: InducingPosterior, kernel, x, y, beta, return_parts=False):
    parts = make_gp_objective(kernel, x, y, post.z, beta)
    params = _params_from_posterior(post, kernel, learn_noise=True)
    value, (score, reg, _) = parts(params)
    if return_parts:
        return float(value), float(score), float(reg)
    return float(value)


def gp_gradient(post: InducingPosterior, kernel, x, y, beta) -> dict:
    """Gradient w.r.t. the optimized (whitened-mean) parameterization."""
    parts = make_gp_objective(kernel, x, y, post.z, beta)
    grad = jax.grad(lambda p: parts(p)[0])(
        _params_from_posterior(post, kernel, learn_noise=True)
    )
    out = {k_: np.asarray(v) for k_, v in grad.items()}
    if not all(np.isfinite(v).all() for v in out.values()):
        raise NumericalError("non-finite gradient")
    return out


def choose_inducing_points(x: np.ndarray, m: int, seed: int = 0) -> np.ndarray:
    """All training inputs when m >= n; k-means centers otherwise."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    if m >= len(x):
        return x.copy()
    from sklearn.cluster import KMeans

    km = KMeans(n_clusters=m, random_state=seed, n_init=10).fit(x)
    return km.cluster_centers_


def gp_fit(
    x: np.ndarray,
    y: np.ndarray,
    kernel: KernelSpec,
    beta: float,
    fit_cfg: FitConfig,
    n_inducing: int | None = None,
    learn_noise: bool = True,
    noise_var: float | None = None,
    prefit_steps: int = 2_000,
) -> FitResult:
    """Fit the mixture inducing-point posterior by Adam with pruning.

    Inputs are expected standardized (zero mean, unit variance). A K=1 pre-fit
    sets the initialization: mixture means jitter the pre-fit mean and the
    per-component noise starts at the pre-fit's global residual variance.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    y = np.asarray(y, dtype=float)
    if np.abs(y.mean()) > 0.5 or not 0.3 < y.std() < 3.0:
        warnings.warn("gp_fit expects standardized inputs; consider standardizing x and y")
    z = choose_inducing_points(x, n_inducing if n_inducing is not None else len(x), fit_cfg.seed)
    m = len(z)
    rng = seed_stream(fit_cfg.seed, "init")
    gdim = x.shape[1] + 1

    base_log_noise = float(np.log(noise_var)) if noise_var is not None else float(np.log(max(y.var(), 1e-4)))

    chol = _chol_kzz(kernel, z)
    kxz = kernel.matrix(x, z)
    a_mat = np.linalg.solve(chol.T, np.linalg.solve(chol, kxz.T)).T
    # conjugate warm start for the K=1 pre-fit mean (exact ELBO optimum in mu
    # for Gaussian likelihood at the initial noise level)
    s0 = np.exp(base_log_noise)
    kzz_inv = np.linalg.solve(chol.T, np.linalg.solve(chol, np.eye(m)))
    mu_warm = np.linalg.solve(a_mat.T @ a_mat / s0 + kzz_inv, a_mat.T @ y / s0)
    u_warm = np.linalg.solve(chol, mu_warm)

    # K=1 pre-fit polishes the warm start and sets the noise initialization
    pre_parts = make_gp_objective(
        kernel, x, y, z, beta, fixed_log_noise=None if learn_noise else base_log_noise
    )
    pre_params = {
        "eta": jnp.zeros((0, gdim)),
        "means_w": jnp.asarray(u_warm[None, :]),
        "log_diag": jnp.full((1, m), np.log(0.1)),
    }
    if learn_noise:
        pre_params["log_noise"] = jnp.asarray([base_log_noise])
    pre_cfg = FitConfig(
        step_size=fit_cfg.step_size,
        max_steps=prefit_steps,
        prune_interval=prefit_steps,
        convergence_tol=fit_cfg.convergence_tol,
        n_components=1,
        seed=fit_cfg.seed,
    )
    pre_out, _, _, _ = run_adam_with_pruning(
        lambda: (lambda p, idx: pre_parts(p, None)),
        pre_params,
        pre_cfg,
        n_components_of=lambda p: 1,
        weights_fn=lambda p: np.ones((1, 1)),
        slice_params_fn=lambda p, keep: p,
        slice_moments_fn=lambda t, keep: t,
    )
    pre_u = np.asarray(pre_out["means_w"])[0]
    resid_var = float(np.maximum(np.mean((y - (a_mat @ chol) @ pre_u) ** 2), 1e-6))

    k = fit_cfg.n_components
    params = {
        "eta": jnp.asarray(fit_cfg.init_eta_scale * rng.standard_normal((k - 1, gdim))),
        "means_w": jnp.asarray(pre_u[None, :] + 0.1 * rng.standard_normal((k, m))),
        "log_diag": jnp.asarray(np.tile(np.asarray(pre_out["log_diag"])[0], (k, 1))),
    }
    if learn_noise:
        # staggered noise levels so components specialize to variance regimes
        # before the first pruning pass instead of collapsing symmetrically
        spread = np.linspace(-1.5, 1.5, k) if k > 1 else np.zeros(1)
        params["log_noise"] = jnp.asarray(np.log(resid_var) + spread)
        fixed = None
    else:
        fixed = np.full(k, base_log_noise)
    parts = make_gp_objective(kernel, x, y, z, beta, fixed_log_noise=fixed)
    if not np.isfinite(float(parts(params)[0])):
        raise NumericalError("objective non-finite at initialization")

    gate = gate_features(x)

    def slice_params(ps, keep):
        keep = np.asarray(keep)
        out = {
            "eta": slice_eta_params(np.asarray(ps["eta"]), keep),
            "means_w": ps["means_w"][keep],
            "log_diag": ps["log_diag"][keep],
        }
        if "log_noise" in ps:
            out["log_noise"] = ps["log_noise"][keep]
        return out

    def slice_moments(tree, keep):
        keep = np.asarray(keep)
        out = {
            "eta": slice_eta_moments(tree["eta"], keep),
            "means_w": tree["means_w"][keep],
            "log_diag": tree["log_diag"][keep],
        }
        if "log_noise" in tree:
            out["log_noise"] = tree["log_noise"][keep]
        return out

    def weights_of(ps):
        logits = np.concatenate(
            [np.zeros((gate.shape[0], 1)), gate @ np.asarray(ps["eta"]).T], axis=1
        )
        logits -= logits.max(axis=1, keepdims=True)
        w = np.exp(logits)
        return w / w.sum(axis=1, keepdims=True)

    params, acc, pruned_history, converged = run_adam_with_pruning(
        lambda: (lambda p, idx: parts(p, None)),
        params,
        fit_cfg,
        n_components_of=lambda p: int(p["means_w"].shape[0]),
        weights_fn=weights_of,
        slice_params_fn=slice_params,
        slice_moments_fn=slice_moments,
    )

    obj, score, reg, ks = acc.arrays()
    return FitResult(
        posterior=_posterior_from_params(params, kernel, z, fixed_log_noise=fixed),
        objective_trace=obj,
        score_trace=score,
        regularizer_trace=reg,
        k_trace=ks,
        pruned_history=pruned_history,
        beta=beta,
        converged=converged,
        floor_hits=acc.floor,
        extras={"prefit_residual_var": resid_var},
    )
