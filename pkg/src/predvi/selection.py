"""Penalty selection by WAIC (grid or Bayesian optimization) and the
held-out metrics: llpd, ROC curves, and TPR at target FPR."""

import json
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from ._rng import seed_stream
from .errors import DataError, NumericalError
from .family import AveragedPosterior, MixturePosterior, averaged_posterior, sample_theta
from .models import (
    LOG_DENSITY_FLOOR,
    LikelihoodModel,
    PriorSpec,
    pointwise_loglik,
    predictive_log_density,
)
from .objective import FitConfig, FitResult, ObjectiveConfig, fit
from .quadrature import QuadratureRule


@dataclass(frozen=True)
class BetaSearchConfig:
    mode: str = "grid"
    grid: tuple = (0.01, 0.1, 1.0, 10.0, 100.0)
    bo_iters: int = 15
    bo_bounds: tuple = (0.01, 100.0)
    waic_samples: int = 2000
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("grid", "bayes-opt"):
            raise ValueError("mode must be 'grid' or 'bayes-opt'")
        lo, hi = self.bo_bounds
        if not (0 < lo < hi):
            raise ValueError("bo_bounds must be positive with lower < upper")
        if self.waic_samples < 100:
            raise ValueError("waic_samples must be >= 100")
        if self.mode == "grid" and (len(self.grid) == 0 or min(self.grid) <= 0):
            raise ValueError("grid must be nonempty and positive")


@dataclass
class MetricReport:
    llpd: float
    waic: float | None = None
    roc: list = field(default_factory=list)
    tpr_at_fpr: dict = field(default_factory=dict)

    def to_json_dict(self) -> dict:
        return {
            "llpd": float(self.llpd),
            "waic": None if self.waic is None else float(self.waic),
            "tpr_at_fpr": {str(k): float(v) for k, v in self.tpr_at_fpr.items()},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_json_dict())

    def write_roc_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("fpr,tpr\n")
            for fpr, tpr in self.roc:
                fh.write(f"{fpr:.17g},{tpr:.17g}\n")


def waic(
    model: LikelihoodModel,
    post_avg: AveragedPosterior,
    x: np.ndarray,
    y: np.ndarray,
    n_draws: int = 2000,
    seed: int = 0,
) -> float:
    """Log-pointwise-predictive mean minus pointwise variance penalty.

    Draws come from the averaged posterior (the covariate-free mixture
    summary); log-sum-exp stabilizes the pointwise means.
    """
    if n_draws < 2:
        raise ValueError("waic needs at least 2 draws")
    thetas = sample_theta(post_avg, n_draws, seed)
    ll = pointwise_loglik(model, x, y, thetas)
    lppd_i = logsumexp(ll, axis=1) - np.log(n_draws)
    dead = ~np.isfinite(lppd_i)
    if dead.any():
        warnings.warn(f"{int(dead.sum())} observation(s) had zero likelihood for all draws; floored")
        lppd_i = np.where(dead, LOG_DENSITY_FLOOR, lppd_i)
    penalty_i = np.var(ll, axis=1, ddof=1)
    return float(np.sum(lppd_i) - np.sum(penalty_i))


def llpd(
    model: LikelihoodModel,
    post: MixturePosterior,
    x_test: np.ndarray,
    y_test: np.ndarray,
    quad: QuadratureRule | None = None,
    x_gate_test: np.ndarray | None = None,
) -> float:
    """Average held-out log predictive density (gating at the test covariates)."""
    y_test = np.atleast_1d(y_test)
    if len(y_test) == 0:
        raise DataError("llpd needs a nonempty test set")
    lp = predictive_log_density(model, post, x_test, y_test, quad, x_gate=x_gate_test)
    return float(np.mean(np.maximum(lp, LOG_DENSITY_FLOOR)))


# ---------------------------------------------------------------------------
# ROC / TPR at fixed FPR
# ---------------------------------------------------------------------------


def roc_and_tpr(scores: np.ndarray, labels: np.ndarray, fpr_targets=(0.01, 0.02, 0.05, 0.1, 0.2)):
    """ROC by threshold sweep over sorted unique scores, plus conservative
    TPR at each FPR target (largest achievable TPR with FPR <= target)."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels)
    if set(np.unique(labels).tolist()) != {0, 1}:
        raise DataError("labels must contain both classes")
    order = np.argsort(-scores, kind="stable")
    sorted_labels = labels[order]
    sorted_scores = scores[order]
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    tp = np.cumsum(sorted_labels)
    fp = np.cumsum(1 - sorted_labels)
    # keep the last index of each distinct score (threshold = that score)
    distinct = np.nonzero(np.diff(sorted_scores))[0]
    idx = np.concatenate([distinct, [len(scores) - 1]])
    fpr = np.concatenate([[0.0], fp[idx] / n_neg])
    tpr = np.concatenate([[0.0], tp[idx] / n_pos])
    points = list(zip(fpr.tolist(), tpr.tolist()))
    tpr_at = {}
    for target in fpr_targets:
        ok = fpr <= target + 1e-12
        tpr_at[float(target)] = float(tpr[ok].max()) if ok.any() else 0.0
    return points, tpr_at


def roc_auc(points) -> float:
    fpr = np.array([p[0] for p in points])
    tpr = np.array([p[1] for p in points])
    return float(np.trapezoid(tpr, fpr))


# ---------------------------------------------------------------------------
# Beta selection
# ---------------------------------------------------------------------------


def _fit_and_waic(model, prior, x, y, beta, fit_cfg, search, quad_order, x_gate, tag):
    obj_cfg = ObjectiveConfig(beta=float(beta), quad_order=quad_order)
    result = fit(model, prior, x, y, obj_cfg, fit_cfg, x_gate=x_gate)
    gate = x if x_gate is None else x_gate
    avg = averaged_posterior(result.posterior, gate)
    waic_seed = int(seed_stream(search.seed, f"waic-{tag}").integers(1 << 31))
    value = waic(model, avg, x, y, n_draws=search.waic_samples, seed=waic_seed)
    return result, value


def select_beta(
    model: LikelihoodModel,
    prior: PriorSpec,
    x: np.ndarray,
    y: np.ndarray,
    search: BetaSearchConfig,
    fit_cfg: FitConfig,
    quad_order: int = 20,
    x_gate: np.ndarray | None = None,
):
    """Return (beta_star, FitResult at beta_star, [(beta, waic), ...])."""
    if search.mode == "grid":
        table = []
        fits = {}
        for i, beta in enumerate(search.grid):
            try:
                result, value = _fit_and_waic(
                    model, prior, x, y, beta, fit_cfg, search, quad_order, x_gate, tag=i
                )
            except NumericalError as exc:
                warnings.warn(f"beta={beta} fit failed and was skipped: {exc}")
                continue
            table.append((float(beta), value))
            fits[float(beta)] = result
        if not table:
            raise NumericalError("every beta in the grid failed to fit")
        best_beta = max(table, key=lambda t: t[1])[0]
        return best_beta, fits[best_beta], table

    return _select_beta_bo(model, prior, x, y, search, fit_cfg, quad_order, x_gate)


def _se_kernel(a, b, length_scale):
    d = a[:, None] - b[None, :]
    return np.exp(-0.5 * (d / length_scale) ** 2)


def _gp_log_marginal(xs, ys, length_scale, noise):
    k = _se_kernel(xs, xs, length_scale) + noise * np.eye(len(xs))
    chol = np.linalg.cholesky(k)
    alpha = np.linalg.solve(chol.T, np.linalg.solve(chol, ys))
    return float(
        -0.5 * ys @ alpha - np.sum(np.log(np.diag(chol))) - 0.5 * len(xs) * np.log(2 * np.pi)
    )


def _gp_predict(xs, ys, grid, length_scale, noise):
    k = _se_kernel(xs, xs, length_scale) + noise * np.eye(len(xs))
    ks = _se_kernel(grid, xs, length_scale)
    chol = np.linalg.cholesky(k)
    alpha = np.linalg.solve(chol.T, np.linalg.solve(chol, ys))
    mean = ks @ alpha
    v = np.linalg.solve(chol, ks.T)
    var = np.maximum(1.0 - np.sum(v * v, axis=0), 1e-12)
    return mean, np.sqrt(var)


def _expected_improvement(mean, sd, best):
    from scipy.stats import norm

    z = (mean - best) / sd
    return sd * (z * norm.cdf(z) + norm.pdf(z))


LENGTH_SCALE_GRID = (0.1, 0.3, 1.0, 3.0)
BO_NOISE = 1e-6
BO_N_INIT = 5
BO_CANDIDATES = 512


def _select_beta_bo(model, prior, x, y, search, fit_cfg, quad_order, x_gate):
    lo, hi = np.log(search.bo_bounds[0]), np.log(search.bo_bounds[1])
    rng = seed_stream(search.seed, "bo")
    # Latin hypercube over log beta: one point per stratum, strata permuted
    strata = rng.permutation(BO_N_INIT)
    log_betas = list(lo + (hi - lo) * (strata + rng.uniform(size=BO_N_INIT)) / BO_N_INIT)
    evaluated = []
    fits = {}

    def evaluate(log_beta, tag):
        beta = float(np.exp(log_beta))
        try:
            result, value = _fit_and_waic(
                model, prior, x, y, beta, fit_cfg, search, quad_order, x_gate, tag=tag
            )
        except NumericalError as exc:
            warnings.warn(f"beta={beta} fit failed and was skipped: {exc}")
            return
        evaluated.append((log_beta, beta, value))
        fits[beta] = result

    for i, lb in enumerate(log_betas):
        evaluate(lb, tag=f"init{i}")
    if not evaluated:
        raise NumericalError("every initial beta failed to fit")

    grid = np.linspace(lo, hi, BO_CANDIDATES)
    while len(evaluated) < search.bo_iters:
        xs = np.array([e[0] for e in evaluated])
        ys = np.array([e[2] for e in evaluated])
        center, spread = ys.mean(), max(ys.std(), 1e-12)
        zs = (ys - center) / spread
        best_ls = max(
            LENGTH_SCALE_GRID, key=lambda ls: _gp_log_marginal(xs, zs, ls, BO_NOISE)
        )
        mean, sd = _gp_predict(xs, zs, grid, best_ls, BO_NOISE)
        ei = _expected_improvement(mean, sd, zs.max())
        evaluate(float(grid[int(np.argmax(ei))]), tag=f"bo{len(evaluated)}")

    best = max(evaluated, key=lambda e: e[2])
    table = [(beta, value) for _, beta, value in evaluated]
    return best[1], fits[best[1]], table
