import numpy as np
import pytest
from scipy.integrate import simpson
from scipy.special import expit

from predvi.errors import DataError
from predvi.family import MixturePosterior
from predvi.models import (
    LikelihoodModel,
    PriorSpec,
    expected_log_prior,
    expected_loglik,
    log_score_sum,
    predictive_density,
    predictive_log_density,
)
from predvi.quadrature import gauss_hermite_rule

from helpers import (
    density_given_theta,
    loglik_given_theta,
    make_glm_instance,
    mc_mean_and_se,
    random_posterior,
    random_spd,
    sample_component,
    sample_conditional_mixture,
)

QUAD = gauss_hermite_rule(30)

ALL_KINDS = ["gaussian", "gaussian_unknown_variance", "logistic", "poisson"]


def make_model(kind, sigma2=0.5):
    if kind == "gaussian":
        return LikelihoodModel.gaussian(sigma2)
    if kind == "gaussian_unknown_variance":
        return LikelihoodModel.gaussian_unknown_variance()
    if kind == "logistic":
        return LikelihoodModel.logistic()
    return LikelihoodModel.poisson()


class TestExpectedLogPrior:
    def test_isotropic_matched_covariance(self):
        p, tau = 3, 1.7
        prior = PriorSpec.isotropic(tau)
        got = expected_log_prior(prior, np.zeros(p), tau**2 * np.eye(p))
        want = -0.5 * p * np.log(2 * np.pi * tau**2) - 0.5 * p
        assert got == pytest.approx(want, abs=1e-12)

    def test_isotropic_scalar_case(self):
        prior = PriorSpec.isotropic(1.0)
        got = expected_log_prior(prior, np.array([2.0]), np.array([[3.0]]))
        want = -0.5 * np.log(2 * np.pi) - 0.5 * (4.0 + 3.0)
        assert got == pytest.approx(want, abs=1e-12)

    @pytest.mark.parametrize("kind", ["isotropic", "general"])
    def test_against_mc(self, kind):
        rng = np.random.default_rng(31)
        for _ in range(4):
            p = int(rng.integers(1, 5))
            mean = rng.standard_normal(p)
            cov = random_spd(rng, p, scale=0.3)
            if kind == "isotropic":
                tau = float(rng.uniform(0.5, 2.0))
                prior = PriorSpec.isotropic(tau)

                def log_prior(t):
                    return -0.5 * p * np.log(2 * np.pi * tau**2) - 0.5 * np.sum(
                        t**2, axis=1
                    ) / tau**2

            else:
                omega = random_spd(rng, p)
                prior = PriorSpec.general(omega)
                omega_inv = np.linalg.inv(omega)
                _, logdet = np.linalg.slogdet(omega)

                def log_prior(t):
                    return (
                        -0.5 * p * np.log(2 * np.pi)
                        - 0.5 * logdet
                        - 0.5 * np.einsum("ni,ij,nj->n", t, omega_inv, t)
                    )

            draws = sample_component(rng, mean, cov, 200_000)
            mc, se = mc_mean_and_se(log_prior(draws))
            got = expected_log_prior(prior, mean, cov)
            assert abs(got - mc) < 3 * se


class TestExpectedLoglik:
    def test_gaussian_degenerate_covariance(self):
        rng = np.random.default_rng(32)
        x, y = make_glm_instance(rng, "gaussian")
        model = make_model("gaussian")
        mu = 0.3 * rng.standard_normal(3)
        got = expected_loglik(model, x, y, mu, 1e-14 * np.eye(3))
        want = loglik_given_theta("gaussian", x, y, mu, sigma2=model.sigma2)
        assert got == pytest.approx(want, abs=1e-8)

    def test_poisson_single_observation(self):
        # x=(1,), y=1, mu=0, Sigma=1: 0 - exp(0.5) - log(1!) = -e^0.5
        model = LikelihoodModel.poisson()
        got = expected_loglik(model, np.ones((1, 1)), np.ones(1), np.zeros(1), np.ones((1, 1)))
        assert got == pytest.approx(-np.exp(0.5), abs=1e-12)

    @pytest.mark.parametrize("kind", ALL_KINDS)
    def test_against_mc(self, kind):
        rng = np.random.default_rng(33)
        model = make_model(kind)
        x, y = make_glm_instance(rng, kind, n=12)
        p = model.theta_dim(x.shape[1])
        mean = 0.4 * rng.standard_normal(p)
        cov = random_spd(rng, p, scale=0.05)
        draws = sample_component(rng, mean, cov, 200_000)
        vals = np.array(
            [loglik_given_theta(kind, x, y, t, sigma2=model.sigma2) for t in draws[:40_000]]
        )
        mc, se = mc_mean_and_se(vals)
        got = expected_loglik(model, x, y, mean, cov, QUAD)
        assert abs(got - mc) < 3 * se

    def test_gaussian_ridge_monotone(self):
        rng = np.random.default_rng(34)
        x, y = make_glm_instance(rng, "gaussian")
        model = make_model("gaussian")
        mu = rng.standard_normal(3)
        cov = random_spd(rng, 3, scale=0.2)
        base = expected_loglik(model, x, y, mu, cov)
        prev = base
        for c in (0.1, 1.0, 10.0):
            val = expected_loglik(model, x, y, mu, cov + c * np.eye(3))
            assert val < prev
            prev = val

    def test_bad_response_rejected(self):
        x = np.ones((3, 1))
        with pytest.raises(DataError):
            expected_loglik(LikelihoodModel.poisson(), x, np.array([0.5, 1, 2]), np.zeros(1), np.eye(1))
        with pytest.raises(DataError):
            expected_loglik(LikelihoodModel.logistic(), x, np.array([0, 1, 2]), np.zeros(1), np.eye(1))


class TestPredictiveDensity:
    def test_gaussian_point_mass_component(self):
        rng = np.random.default_rng(35)
        model = make_model("gaussian", sigma2=0.7)
        mu = rng.standard_normal((1, 3))
        raw = np.full((1, 3, 3), 0.0) * 0
        raw[0][np.diag_indices(3)] = 0.5 * np.log(1e-14)
        post = MixturePosterior(mu, raw, np.zeros((0, 3)))
        x = rng.standard_normal(3)
        y = 0.4
        got = predictive_density(model, post, x, y)
        m = x @ mu[0]
        want = np.exp(-0.5 * (np.log(2 * np.pi * 0.7) + (y - m) ** 2 / 0.7))
        assert got == pytest.approx(want, rel=1e-10)

    def test_logistic_point_mass_component(self):
        rng = np.random.default_rng(36)
        mu = rng.standard_normal((1, 2))
        raw = np.zeros((1, 2, 2))
        raw[0][np.diag_indices(2)] = 0.5 * np.log(1e-14)
        post = MixturePosterior(mu, raw, np.zeros((0, 2)))
        x = rng.standard_normal(2)
        prob = expit(x @ mu[0])
        assert predictive_density(LikelihoodModel.logistic(), post, x, 1.0, QUAD) == pytest.approx(
            prob, abs=1e-8
        )
        assert predictive_density(LikelihoodModel.logistic(), post, x, 0.0, QUAD) == pytest.approx(
            1 - prob, abs=1e-8
        )

    @pytest.mark.parametrize("kind", ALL_KINDS)
    def test_against_mc(self, kind):
        rng = np.random.default_rng(37)
        model = make_model(kind)
        for k in (1, 3):
            p = model.theta_dim(3)
            post = random_posterior(rng, k, p, 3, cov_scale=0.4)
            x = np.concatenate([[1.0], 0.8 * rng.standard_normal(2)])
            if kind == "logistic":
                y = 1.0
            elif kind == "poisson":
                y = 2.0
            else:
                y = float(rng.standard_normal())
            thetas = sample_conditional_mixture(rng, post, x[: post.gating_dim], 400_000)
            dens = density_given_theta(kind, x, y, thetas, sigma2=model.sigma2)
            mc, se = mc_mean_and_se(dens)
            got = predictive_density(model, post, x, y, QUAD, x_gate_row=x[: post.gating_dim])
            assert abs(got - mc) < 3 * se + 1e-12

    def test_poisson_mass_sums_to_one(self):
        rng = np.random.default_rng(38)
        post = random_posterior(rng, 2, 2, 2, mean_scale=0.3, cov_scale=0.3)
        x = np.array([1.0, 0.5])
        ys = np.arange(201, dtype=float)
        lp = predictive_log_density(
            LikelihoodModel.poisson(), post, np.tile(x, (201, 1)), ys, QUAD
        )
        total = np.exp(lp).sum()
        assert 1 - 1e-6 <= total <= 1 + 1e-12

    def test_logistic_mass_binary_partition(self):
        rng = np.random.default_rng(39)
        post = random_posterior(rng, 3, 2, 2)
        x = rng.standard_normal(2)
        m = LikelihoodModel.logistic()
        p1 = predictive_density(m, post, x, 1.0, QUAD)
        p0 = predictive_density(m, post, x, 0.0, QUAD)
        assert p0 + p1 == pytest.approx(1.0, abs=1e-10)

    def test_gaussian_density_integrates_to_one(self):
        rng = np.random.default_rng(40)
        post = random_posterior(rng, 2, 2, 2)
        model = make_model("gaussian", sigma2=0.4)
        x = rng.standard_normal(2)
        m = float(np.mean(post.means @ x))
        sd_max = np.sqrt(
            max(np.einsum("i,kij,j->k", x, post.covariances(), x)) + model.sigma2
        ) + np.ptp(post.means @ x)
        grid = np.linspace(m - 10 * sd_max, m + 10 * sd_max, 4001)
        lp = predictive_log_density(model, post, np.tile(x, (len(grid), 1)), grid)
        assert simpson(np.exp(lp), x=grid) == pytest.approx(1.0, abs=1e-6)

    def test_unknown_variance_density_integrates_to_one(self):
        rng = np.random.default_rng(41)
        post = random_posterior(rng, 2, 3, 2, cov_scale=0.3)
        model = LikelihoodModel.gaussian_unknown_variance()
        x = np.array([1.0, 0.3])
        grid = np.linspace(-40, 40, 8001)
        lp = predictive_log_density(model, post, np.tile(x, (len(grid), 1)), grid, QUAD)
        assert simpson(np.exp(lp), x=grid) == pytest.approx(1.0, abs=1e-4)


class TestLogScoreSum:
    def test_single_gaussian_at_mean(self):
        model = make_model("gaussian", sigma2=0.5)
        post = random_posterior(np.random.default_rng(42), 1, 2, 2)
        x = np.array([[1.0, 2.0]])
        m = float(x[0] @ post.means[0])
        v = float(x[0] @ post.covariances()[0] @ x[0]) + model.sigma2
        got = log_score_sum(model, post, x, np.array([m]))
        assert got == pytest.approx(-0.5 * np.log(2 * np.pi * v), abs=1e-12)

    def test_equals_sum_of_logs(self):
        rng = np.random.default_rng(43)
        model = LikelihoodModel.logistic()
        post = random_posterior(rng, 3, 3, 3)
        x, y = make_glm_instance(rng, "logistic", n=20)
        total = log_score_sum(model, post, x, y, QUAD)
        single = sum(
            np.log(predictive_density(model, post, xi, yi, QUAD)) for xi, yi in zip(x, y)
        )
        assert total == pytest.approx(single, abs=1e-10)

    def test_empty_rejected(self):
        model = LikelihoodModel.logistic()
        post = random_posterior(np.random.default_rng(44), 2, 2, 2)
        with pytest.raises(DataError):
            log_score_sum(model, post, np.zeros((0, 2)), np.zeros(0))
