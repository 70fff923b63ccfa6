"""Learning noisy-OR Bayesian networks with parallel max-product."""

from .mf_vi import best_elbo, elbo_vi, hybrid_train, optimize_vi, vi_posterior_mode
from .network import (CLIP_FLOOR, NoisyOrNetwork, ParamStore, build_network, conditional_prob_zero,
                      elbo_grad, elbo_mp, lower_to_factor_graph)
from .pmp import PmpQueryConfig, PosteriorAssignment, gumbel, pmp_batch, pmp_query, posterior_mode
from .training import AdamState, InitScheme, TrainConfig, init_params, train, update_parameters

__version__ = "0.1.0"

__all__ = [
    "best_elbo", "elbo_vi", "hybrid_train", "optimize_vi", "vi_posterior_mode",
    "CLIP_FLOOR", "NoisyOrNetwork", "ParamStore", "build_network", "conditional_prob_zero",
    "elbo_grad", "elbo_mp", "lower_to_factor_graph",
    "PmpQueryConfig", "PosteriorAssignment", "gumbel", "pmp_batch", "pmp_query", "posterior_mode",
    "AdamState", "InitScheme", "TrainConfig", "init_params", "train", "update_parameters",
]
