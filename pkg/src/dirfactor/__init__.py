"""Bayesian Dirichlet-factor regression for compositional count data."""

__version__ = "0.1.0"

from .design import CovariateMatrix, Term, spline_basis
from .model import (Hyperparams, LatentState, OtuTable, ScenarioSpec, composition,
                    composition_from_state, composition_linear_positive,
                    composition_logistic_normal, log_likelihood, preset_spec, q_mean,
                    simulate_dataset)
from .sampler import Chain, SamplerConfig, gibbs_sweep, run_chain

__all__ = [
    "Chain", "CovariateMatrix", "Hyperparams", "LatentState", "OtuTable", "SamplerConfig",
    "ScenarioSpec", "Term", "composition", "composition_from_state",
    "composition_linear_positive", "composition_logistic_normal", "gibbs_sweep",
    "log_likelihood", "preset_spec", "q_mean", "run_chain", "simulate_dataset",
    "spline_basis",
]
