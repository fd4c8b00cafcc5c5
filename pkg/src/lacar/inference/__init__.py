"""Inference for the hierarchical model under a fixed neighbourhood matrix."""

from .laplace import GridConfig, LatentMode, fit, laplace_log_marginal, latent_mode, log_hyperprior
from .mcmc import MCMCConfig, fit_mcmc, run_chain
from .model import FAMILIES, Hyper, ModelSpec, Priors
from .results import FitResult, HyperGrid, Summary, credible_intervals_phi

__all__ = [
    "FAMILIES", "FitResult", "GridConfig", "Hyper", "HyperGrid", "LatentMode", "MCMCConfig", "ModelSpec", "Priors",
    "Summary", "credible_intervals_phi", "fit", "laplace_log_marginal", "latent_mode", "log_hyperprior",
    "fit_mcmc", "run_chain",
]
