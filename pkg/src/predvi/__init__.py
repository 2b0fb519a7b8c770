"""Predictive variational inference with Gaussian-mixture posteriors."""

from .family import (
    AveragedPosterior,
    MixturePosterior,
    averaged_posterior,
    entropy_lower_bound,
    mixture_weights,
    sample_theta,
)
from .gaussians import CholeskyFactor, chol_to_cov, cov_to_chol, mvn_logpdf
from .models import (
    LikelihoodModel,
    PriorSpec,
    expected_log_prior,
    expected_loglik,
    log_score_sum,
    predictive_density,
    predictive_log_density,
)
from .quadrature import QuadratureRule, gauss_hermite_rule

__version__ = "0.1.0"

__all__ = [
    "AveragedPosterior",
    "CholeskyFactor",
    "LikelihoodModel",
    "MixturePosterior",
    "PriorSpec",
    "QuadratureRule",
    "averaged_posterior",
    "chol_to_cov",
    "cov_to_chol",
    "entropy_lower_bound",
    "expected_log_prior",
    "expected_loglik",
    "gauss_hermite_rule",
    "log_score_sum",
    "mixture_weights",
    "mvn_logpdf",
    "predictive_density",
    "predictive_log_density",
    "sample_theta",
]
