import numpy as np
import pytest

from predvi._jax import jax, jnp
from predvi.errors import DataError
from predvi.family import MixturePosterior
from predvi.hierarchical import (
    HierarchicalData,
    HierarchicalPosterior,
    HierarchicalSpec,
    cluster_map,
    estimate_variances_mom,
    hierarchical_fit,
    hierarchical_gradient,
    hierarchical_objective,
    hierarchical_predictive,
    hierarchical_predictive_logpdf,
    make_hierarchical_objective,
    poly_features,
    stacked_design,
)
from predvi.models import LikelihoodModel, PriorSpec
from predvi.objective import FitConfig, ObjectiveConfig, pvi_objective
from predvi.quadrature import gauss_hermite_rule

from helpers import mc_mean_and_se, random_posterior

from test_objective import finite_difference_gradient


def toy_spec(g=2, s2a=0.3, s2b=0.4, s2e=0.2):
    return HierarchicalSpec(n_groups=g, sigma2_a=s2a, sigma2_b=s2b, sigma2_eps=s2e)


def toy_data(rng, spec, nt=3, missing=False):
    times = np.linspace(0.1, 0.9, nt)
    y = rng.standard_normal((nt, spec.n_groups))
    mask = np.ones_like(y, dtype=bool)
    if missing:
        mask[0, 0] = False
    return HierarchicalData(times=times, y=y, mask=mask)


def toy_posterior(rng, spec, k=2, local_n=3):
    post = random_posterior(rng, k, spec.dim, spec.n_trend, mean_scale=0.4, cov_scale=0.5)
    return HierarchicalPosterior(
        mixture=post,
        local_means=0.2 * rng.standard_normal(local_n),
        local_logvars=np.log(0.3) + 0.2 * rng.standard_normal(local_n),
    )


class TestObjective:
    def test_beta_affine(self):
        rng = np.random.default_rng(0)
        spec = toy_spec()
        data = toy_data(rng, spec)
        post = toy_posterior(rng, spec)
        vals = [hierarchical_objective(spec, post, data, b) for b in (0.2, 1.0, 7.0)]
        slope1 = (vals[1] - vals[0]) / 0.8
        slope2 = (vals[2] - vals[0]) / 6.8
        assert slope1 == pytest.approx(slope2, rel=1e-10)

    @pytest.mark.parametrize("k", [1, 2])
    def test_gradient_matches_fd(self, k):
        rng = np.random.default_rng(k)
        spec = toy_spec()
        data = toy_data(rng, spec, missing=True)
        post = toy_posterior(rng, spec, k=k)
        parts = make_hierarchical_objective(spec, data, beta=0.7)
        params = {
            "eta": jnp.asarray(post.mixture.eta),
            "means": jnp.asarray(post.mixture.means),
            "raw": jnp.asarray(post.mixture.chol_raw),
            "local_m": jnp.asarray(post.local_means),
            "local_logv": jnp.asarray(post.local_logvars),
        }
        value_fn = jax.jit(lambda p: parts(p)[0])
        analytic = jax.grad(lambda p: parts(p)[0])(params)
        fd = finite_difference_gradient(lambda p: float(value_fn(p)), params)
        for a, f in zip(jax.tree_util.tree_leaves(analytic), jax.tree_util.tree_leaves(fd)):
            if np.asarray(a).size == 0:
                continue
            err = np.abs(np.asarray(a) - np.asarray(f)) / (1.0 + np.abs(np.asarray(f)))
            assert err.max() < 1e-4

    def test_single_cell_against_mc(self):
        # g=1, one time, K=1, all variances 1: every expectation is MC-checkable
        rng = np.random.default_rng(5)
        spec = HierarchicalSpec(n_groups=1, sigma2_a=1.0, sigma2_b=1.0, sigma2_eps=1.0)
        data = HierarchicalData(times=np.array([0.5]), y=np.array([[0.8]]), mask=np.ones((1, 1), bool))
        post = toy_posterior(rng, spec, k=1, local_n=1)
        beta = 1.3
        got = hierarchical_objective(spec, post, data, beta)

        mu, cov = post.mixture.means[0], post.mixture.covariances()[0]
        m_loc, v_loc = post.local_means[0], float(np.exp(post.local_logvars[0]))
        u = stacked_design(spec, 0.5)[0]
        m_draws = 400_000
        chol = np.linalg.cholesky(cov)
        thetas = mu + rng.standard_normal((m_draws, spec.dim)) @ chol.T
        a_draws = m_loc + np.sqrt(v_loc) * rng.standard_normal(m_draws)
        y_val = 0.8

        # score: exact mixture predictive, checked via MC over (theta, fresh a)
        a_new = rng.standard_normal(m_draws)
        dens = np.exp(-0.5 * (np.log(2 * np.pi) + (y_val - thetas @ u - a_new) ** 2))
        mc_s, se_s = mc_mean_and_se(dens)

        # regularizer pieces by MC
        ll = -0.5 * (np.log(2 * np.pi) + (y_val - thetas @ u - a_draws) ** 2)
        lpb = -0.5 * (4 * np.log(2 * np.pi * spec.prior_sd**2)) - 0.5 * np.sum(
            thetas[:, :4] ** 2, axis=1
        ) / spec.prior_sd**2
        lpg = -0.5 * np.log(2 * np.pi) - 0.5 * thetas[:, 4] ** 2
        lpa = -0.5 * np.log(2 * np.pi) - 0.5 * a_draws**2
        mc_terms, se_terms = mc_mean_and_se(ll + lpb + lpg + lpa)
        huber = 0.5 * spec.dim * np.log(4 * np.pi) + 0.5 * np.linalg.slogdet(cov)[1]
        local_ent = 0.5 * (np.log(2 * np.pi) + 1.0 + post.local_logvars[0])
        want = np.log(mc_s) + beta * (mc_terms + huber + local_ent)
        tol = 3 * (se_s / mc_s + beta * se_terms)
        assert abs(got - want) < tol

    def test_unknown_group_rejected(self):
        with pytest.raises(DataError):
            HierarchicalData.from_long([0.1, 0.2], [0, 3], [1.0, 2.0], n_groups=2)


class TestPredictive:
    def test_point_mass_limit(self):
        rng = np.random.default_rng(6)
        spec = toy_spec(g=3)
        d = spec.dim
        mu = rng.standard_normal((1, d))
        raw = np.zeros((1, d, d))
        raw[0][np.diag_indices(d)] = 0.5 * np.log(1e-14)
        post = HierarchicalPosterior(
            MixturePosterior(mu, raw, np.zeros((0, spec.n_trend))),
            local_means=np.zeros(2),
            local_logvars=np.zeros(2),
        )
        w, means, covs = hierarchical_predictive(spec, post, 0.4)
        design = stacked_design(spec, 0.4)
        assert w == pytest.approx([1.0])
        assert means[0] == pytest.approx(design @ mu[0], abs=1e-10)
        noise = (spec.sigma2_eps + spec.sigma2_a) * np.eye(3)
        assert covs[0] == pytest.approx(noise, abs=1e-10)

    def test_marginal_matches_row(self):
        rng = np.random.default_rng(7)
        spec = toy_spec(g=3)
        post = toy_posterior(rng, spec, k=2)
        t = 0.3
        w, means, covs = hierarchical_predictive(spec, post, t)
        design = stacked_design(spec, t)
        j = 1
        for k in range(2):
            var_j = design[j] @ post.mixture.covariances()[k] @ design[j] + (
                spec.sigma2_eps + spec.sigma2_a
            )
            assert covs[k][j, j] == pytest.approx(var_j, rel=1e-12)
            assert means[k][j] == pytest.approx(design[j] @ post.mixture.means[k], rel=1e-12)

    def test_density_against_mc(self):
        rng = np.random.default_rng(8)
        spec = toy_spec(g=2)
        post = toy_posterior(rng, spec, k=2)
        t = 0.6
        y_vec = rng.standard_normal(2)
        got = np.exp(hierarchical_predictive_logpdf(spec, post, t, y_vec))
        gate = poly_features(t, spec.poly_degree)[0]
        from helpers import sample_conditional_mixture

        thetas = sample_conditional_mixture(rng, post.mixture, gate, 400_000)
        design = stacked_design(spec, t)
        # the stated predictive adds (s2_eps + s2_a) I_g: the fresh per-time
        # effect enters each coordinate independently
        a_new = np.sqrt(spec.sigma2_a) * rng.standard_normal((len(thetas), 2))
        mean_draws = thetas @ design.T + a_new
        resid = y_vec[None, :] - mean_draws
        dens = np.exp(
            -0.5 * (2 * np.log(2 * np.pi * spec.sigma2_eps) + np.sum(resid**2, axis=1) / spec.sigma2_eps)
        )
        mc, se = mc_mean_and_se(dens)
        assert abs(got - mc) < 3 * se

    def test_covariance_spd_and_integrates(self):
        rng = np.random.default_rng(9)
        spec = toy_spec(g=1)
        post = toy_posterior(rng, spec, k=3)
        from scipy.integrate import simpson

        for t in (0.0, 0.5, 1.0):
            w, means, covs = hierarchical_predictive(spec, post, t)
            assert all(np.linalg.eigvalsh(c).min() > 0 for c in covs)
        grid = np.linspace(-25, 25, 4001)
        dens = np.array(
            [np.exp(hierarchical_predictive_logpdf(spec, post, 0.5, np.array([v]))) for v in grid]
        )
        assert simpson(dens, x=grid) == pytest.approx(1.0, abs=1e-5)

    def test_extrapolation_warns(self):
        rng = np.random.default_rng(10)
        spec = toy_spec()
        post = toy_posterior(rng, spec)
        with pytest.warns(UserWarning):
            hierarchical_predictive(spec, post, 1.4)


class TestClusterMap:
    def test_single_component(self):
        rng = np.random.default_rng(11)
        spec = toy_spec()
        post = toy_posterior(rng, spec, k=1)
        assert (cluster_map(post, np.linspace(0, 1, 7)) == 0).all()

    def test_single_crossing(self):
        # logit of component 2 is c*(t - 0.5): switches exactly at t=0.5
        spec = toy_spec()
        d = spec.dim
        mix = MixturePosterior(
            np.zeros((2, d)), np.zeros((2, d, d)), np.array([[-5.0, 10.0, 0.0, 0.0]])
        )
        post = HierarchicalPosterior(mix, np.zeros(1), np.zeros(1))
        times = np.linspace(0, 1, 101)
        idx = cluster_map(post, times)
        switches = np.nonzero(np.diff(idx))[0]
        assert len(switches) == 1
        assert abs(times[switches[0] + 1] - 0.5) < 0.02

    def test_matches_brute_force(self):
        rng = np.random.default_rng(12)
        spec = toy_spec()
        post = toy_posterior(rng, spec, k=4)
        times = rng.uniform(size=20)
        got = cluster_map(post, times)
        from predvi.family import mixture_weights

        want = [
            int(np.argmax(mixture_weights(post.mixture, poly_features(t, 3)[0])))
            for t in times
        ]
        assert got.tolist() == want


class TestDegenerateLimit:
    def test_matches_glm_when_effects_vanish(self):
        # sigma_a, sigma_b -> 0 and g=1 reduces the model to a fixed-variance
        # Gaussian GLM on the polynomial features; the objective differs only
        # by a closed-form constant (pinned-b prior, local priors/entropies,
        # and the extra entropy coordinate)
        rng = np.random.default_rng(13)
        eps = 1e-10
        spec = HierarchicalSpec(n_groups=1, sigma2_a=eps, sigma2_b=eps, sigma2_eps=0.3)
        nt = 6
        times = np.linspace(0.05, 0.95, nt)
        yv = rng.standard_normal((nt, 1))
        data = HierarchicalData(times=times, y=yv, mask=np.ones((nt, 1), bool))

        k = 2
        glm_post = random_posterior(rng, k, 4, 4, mean_scale=0.4)
        d = spec.dim
        means = np.hstack([glm_post.means, np.zeros((k, 1))])
        raw = np.zeros((k, d, d))
        raw[:, :4, :4] = glm_post.chol_raw
        raw[:, 4, 4] = 0.5 * np.log(eps)
        hier_post = HierarchicalPosterior(
            MixturePosterior(means, raw, glm_post.eta),
            local_means=np.zeros(nt),
            local_logvars=np.full(nt, np.log(eps)),
        )
        beta = 0.9
        obj_h, score_h, reg_h = hierarchical_objective(spec, hier_post, data, beta, return_parts=True)

        x_glm = poly_features(times, 3)
        model = LikelihoodModel.gaussian(spec.sigma2_eps + eps)
        prior = PriorSpec.isotropic(spec.prior_sd)
        obj_g, score_g, reg_g = pvi_objective(
            model, prior, glm_post, x_glm, yv[:, 0], ObjectiveConfig(beta=beta), return_parts=True
        )
        assert score_h == pytest.approx(score_g, abs=1e-6)

        const = (
            (-0.5 * np.log(2 * np.pi * eps) - (0 + eps) / (2 * eps))  # pinned b prior
            + nt * (-0.5 * np.log(2 * np.pi * eps) - eps / (2 * eps))  # local a priors
            + 0.5 * np.log(4 * np.pi * eps)  # extra entropy coordinate
            + nt * 0.5 * (np.log(2 * np.pi) + 1.0 + np.log(eps))  # local entropies
        )
        assert reg_h - reg_g == pytest.approx(const, abs=1e-4)

        # predictive density agreement at a fresh point
        t_new, y_new = 0.35, 0.2
        lp_h = hierarchical_predictive_logpdf(spec, hier_post, t_new, np.array([y_new]))
        from predvi.models import predictive_log_density

        lp_g = predictive_log_density(
            model, glm_post, poly_features(t_new, 3), np.array([y_new])
        )[0]
        assert lp_h == pytest.approx(lp_g, abs=1e-6)


class TestFitAndData:
    def synthetic(self, rng, spec, nt=25):
        times = np.linspace(0, 1, nt)
        beta_true = np.array([1.0, -2.0, 0.5, 1.5])
        f = poly_features(times, 3) @ beta_true
        b = np.sqrt(spec.sigma2_b) * rng.standard_normal(spec.n_groups)
        a = np.sqrt(spec.sigma2_a) * rng.standard_normal(nt)
        y = (
            f[:, None]
            + a[:, None]
            + b[None, :]
            + np.sqrt(spec.sigma2_eps) * rng.standard_normal((nt, spec.n_groups))
        )
        return HierarchicalData(times=times, y=y, mask=np.ones_like(y, dtype=bool))

    def test_fit_runs_and_predicts(self):
        rng = np.random.default_rng(14)
        spec = toy_spec(g=3, s2a=0.05, s2b=0.3, s2e=0.05)
        data = self.synthetic(rng, spec)
        res = hierarchical_fit(
            spec, data, beta=1.0, fit_cfg=FitConfig(n_components=3, max_steps=4000, seed=2, prune_interval=1000)
        )
        assert np.isfinite(res.objective_trace).all()
        w, means, covs = hierarchical_predictive(spec, res.posterior, 0.5)
        assert abs(w.sum() - 1.0) < 1e-12
        # predictive mean should land near the data scale
        y_mid = data.y[len(data.times) // 2]
        assert np.abs(means[np.argmax(w)] - y_mid).max() < 2.0

    def test_from_long_round_trip(self):
        time = [0.0, 0.0, 0.5, 1.0]
        group = [0, 1, 0, 1]
        y = [1.0, 2.0, 3.0, 4.0]
        data = HierarchicalData.from_long(time, group, y)
        assert data.y.shape == (3, 2)
        assert data.mask.sum() == 4
        assert data.y[0, 1] == 2.0
        assert not data.mask[1, 1]

    def test_mom_variances_recover_scale(self):
        rng = np.random.default_rng(15)
        spec = HierarchicalSpec(n_groups=8, sigma2_a=0.5, sigma2_b=1.0, sigma2_eps=0.1)
        data = self.synthetic(rng, spec, nt=200)
        s2a, s2b, s2e = estimate_variances_mom(data)
        assert 0.2 < s2a < 1.0
        assert 0.3 < s2b < 3.0
        assert 0.05 < s2e < 0.2
