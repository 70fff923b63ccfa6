"""Benchmark problems: layered graphs, BMF, overparametrized recovery, blind deconvolution."""

from .bd import (BdInstance, BdLayout, bd_network, bd_test_re, boolean_convolve, features_iou, gen_bd,
                 matched_ious)
from .bmf import (BmfInstance, bmf_network, bmf_network_from_truth, bmf_test_re, boolean_product, gen_bmf,
                  p_uv, trivial_elbo)
from .layered import (LayeredGraphSpec, LayeredTopology, ZeroActivityError,
                      agglomerative_average_linkage, build_layered_graph, cooccurrence_distance)
from .matching import bipartite_weights, hidden_priors, min_cost_matching
from .ovpm import (OvpmTruth, RecoveryReport, default_truth, gen_ovpm_like, network_from_truth, ovpm_network,
                   ovpm_recovery, recovery_from_weights)

__all__ = [
    "BdInstance", "BdLayout", "bd_network", "bd_test_re", "boolean_convolve", "features_iou", "gen_bd",
    "matched_ious",
    "BmfInstance", "bmf_network", "bmf_test_re", "boolean_product", "gen_bmf", "p_uv",
    "bmf_network_from_truth", "trivial_elbo",
    "LayeredGraphSpec", "LayeredTopology", "ZeroActivityError", "agglomerative_average_linkage",
    "build_layered_graph", "cooccurrence_distance", "bipartite_weights", "hidden_priors",
    "min_cost_matching",
    "OvpmTruth", "RecoveryReport", "gen_ovpm_like", "ovpm_network", "ovpm_recovery",
    "default_truth", "network_from_truth", "recovery_from_weights",
]
