"""
noisecov: condition-dependent noise covariance estimation with Wishart-process
priors, fitted by stochastic variational inference.

Modules
-------
kernels     per-axis and product kernels, Gram matrices and their derivatives
model       generative specification, covariance assembly, prior sampling
inference   ELBO, gradients, Adam and ``fit``
posterior   prediction at seen and unseen conditions, held-out likelihoods
baselines   empirical, grand, weighted-average, Ledoit-Wolf, graphical lasso
analysis    QDA/LDA decoding, Fisher information, comparison metrics
harness     data formats, synthetic benchmark, cross-validation, experiments
"""

from .errors import FitError, SingularMatrixError
from .inference import FitConfig, Posterior, VariationalState, elbo, elbo_gradient, fit
from .kernels import AxisKernel, ProductKernel
from .model import ModelSpec, MomentField, sample_prior
from .posterior import heldout_loglik, posterior_gradients, predict_moments

__version__ = "0.1.0"

__all__ = [
    "AxisKernel",
    "ProductKernel",
    "ModelSpec",
    "MomentField",
    "sample_prior",
    "FitConfig",
    "VariationalState",
    "Posterior",
    "elbo",
    "elbo_gradient",
    "fit",
    "predict_moments",
    "heldout_loglik",
    "posterior_gradients",
    "FitError",
    "SingularMatrixError",
]
