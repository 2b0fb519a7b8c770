"""Generic Adam-with-pruning loop shared by the GLM, hierarchical, and GP fits.

The caller supplies the objective `parts` function, the initial parameter
pytree, and three closures: gating weights for the pruning rule, parameter
slicing (which re-anchors gating), and moment slicing (which only drops rows).
"""

import warnings

import numpy as np

from ._jax import jax, jnp


def make_segment_runner(parts, fit_cfg):
    """Jitted scan over Adam steps; yields per-step (objective, score, reg, floor)."""
    lr = fit_cfg.step_size
    b1, b2, eps = fit_cfg.adam_beta1, fit_cfg.adam_beta2, fit_cfg.adam_eps
    value_and_grad = jax.value_and_grad(parts, has_aux=True)

    def one_step(carry, batch_idx):
        params, m, v, t = carry
        (value, aux), grads = value_and_grad(params, batch_idx)
        t = t + 1
        m = jax.tree_util.tree_map(lambda a, g: b1 * a + (1 - b1) * g, m, grads)
        v = jax.tree_util.tree_map(lambda a, g: b2 * a + (1 - b2) * g * g, v, grads)
        bc1 = 1 - b1**t
        bc2 = 1 - b2**t
        params = jax.tree_util.tree_map(
            lambda p, mm, vv: p + lr * (mm / bc1) / (jnp.sqrt(vv / bc2) + eps),
            params,
            m,
            v,
        )
        score, reg, floor = aux
        return (params, m, v, t), (value, score, reg, floor)

    def run(params, m, v, t, batches):
        (params, m, v, t), traces = jax.lax.scan(one_step, (params, m, v, t), batches)
        return params, m, v, t, traces

    return jax.jit(run)


class TraceAccumulator:
    def __init__(self):
        self.objective = []
        self.score = []
        self.reg = []
        self.k = []
        self.floor = 0

    def extend(self, traces, k):
        value, score, reg, floor = traces
        self.objective.append(np.asarray(value))
        self.score.append(np.asarray(score))
        self.reg.append(np.asarray(reg))
        self.k.append(np.full(len(np.asarray(value)), k, dtype=int))
        self.floor += int(np.asarray(floor).sum())

    @property
    def n_steps(self):
        return sum(len(a) for a in self.objective)

    def last_objective(self):
        return float(self.objective[-1][-1])

    def arrays(self):
        return (
            np.concatenate(self.objective),
            np.concatenate(self.score),
            np.concatenate(self.reg),
            np.concatenate(self.k),
        )


def zeros_like_tree(params):
    return jax.tree_util.tree_map(jnp.zeros_like, params)


def never_dominant(weights):
    """Indices of components that are argmax for no row (lowest index wins ties)."""
    weights = np.atleast_2d(np.asarray(weights))
    dominant = set(np.argmax(weights, axis=1).tolist())
    return [k for k in range(weights.shape[1]) if k not in dominant]


def slice_eta_params(eta, keep):
    """Drop pruned gating rows and re-anchor the first survivor's row to zero."""
    full = np.vstack([np.zeros((1, eta.shape[1])), np.asarray(eta)])
    kept = full[np.asarray(keep)]
    kept = kept - kept[0]
    return jnp.asarray(kept[1:])


def slice_eta_moments(eta_moments, keep):
    """Moments for surviving free rows (the new anchor's state is dropped)."""
    g = eta_moments.shape[1]
    full = jnp.concatenate([jnp.zeros((1, g)), eta_moments], axis=0)
    return full[np.asarray(keep)][1:]


def run_adam_with_pruning(
    build_parts,
    params,
    fit_cfg,
    *,
    n_components_of,
    weights_fn,
    slice_params_fn,
    slice_moments_fn,
    make_batches=None,
):
    """Two-phase loop: prune every interval until stable, then run to convergence.

    Returns (params, accumulator, pruned_history, converged).
    `build_parts()` is re-invoked after each prune so shapes re-jit cleanly.
    """
    runner = make_segment_runner(build_parts(), fit_cfg)
    m = zeros_like_tree(params)
    v = zeros_like_tree(params)
    t = jnp.asarray(0, dtype=jnp.int64)
    acc = TraceAccumulator()
    pruned_history = []

    def run_segment(n_steps):
        nonlocal params, m, v, t
        if make_batches is not None:
            batches = make_batches(n_steps)
        else:
            batches = jnp.zeros((n_steps, 0), dtype=jnp.int32)
        params, m, v, t, traces = runner(params, m, v, t, batches)
        acc.extend(traces, n_components_of(params))

    # phase 1: prune every interval until a full interval passes with no removal
    while acc.n_steps < fit_cfg.max_steps:
        seg = min(fit_cfg.prune_interval, fit_cfg.max_steps - acc.n_steps)
        run_segment(seg)
        if not np.isfinite(acc.last_objective()):
            warnings.warn("objective became non-finite during optimization; stopping")
            return params, acc, pruned_history, False
        removed = never_dominant(weights_fn(params))
        if removed and n_components_of(params) > 1:
            keep = [k for k in range(n_components_of(params)) if k not in set(removed)]
            pruned_history.append((acc.n_steps, removed))
            params = slice_params_fn(params, keep)
            m = slice_moments_fn(m, keep)
            v = slice_moments_fn(v, keep)
            runner = make_segment_runner(build_parts(), fit_cfg)
            continue
        if seg == fit_cfg.prune_interval:
            break

    # phase 2: run to convergence
    converged = False
    while acc.n_steps < fit_cfg.max_steps:
        prev = acc.last_objective()
        seg = min(fit_cfg.convergence_window, fit_cfg.max_steps - acc.n_steps)
        run_segment(seg)
        if not np.isfinite(acc.last_objective()):
            warnings.warn("objective became non-finite during optimization; stopping")
            return params, acc, pruned_history, False
        rel = abs(acc.last_objective() - prev) / (1.0 + abs(prev))
        if seg == fit_cfg.convergence_window and rel < fit_cfg.convergence_tol:
            converged = True
            break

    return params, acc, pruned_history, converged
