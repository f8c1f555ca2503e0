"""
Anchor-space optimal transport: approximate many pairwise Wasserstein
distances by mapping every distribution onto a shared set of learned anchors.
"""

from .anchor import (
    AnchorSpace,
    MappedDistribution,
    anchor_cost,
    asot_exact,
    easot,
    load_anchor_space,
    map_distribution,
    prop1_bound,
    prop2_bound,
    reconstructed_cost,
    save_anchor_space,
)
from .batch import DistanceMatrix, ProblemSet, batched_sinkhorn_fixed, bds_sinkhorn, pairwise_matrix
from .errors import AsotError, InfeasibleError, InvalidArgumentError, NumericalError, ParseError
from .transport import DiscreteDistribution, SinkhornConfig, euclidean_cost, sinkhorn, solve_exact

__version__ = "0.1.0"

__all__ = [
    "AnchorSpace", "MappedDistribution", "anchor_cost", "asot_exact", "easot", "load_anchor_space",
    "map_distribution", "prop1_bound", "prop2_bound", "reconstructed_cost", "save_anchor_space",
    "DistanceMatrix", "ProblemSet", "batched_sinkhorn_fixed", "bds_sinkhorn", "pairwise_matrix",
    "AsotError", "InfeasibleError", "InvalidArgumentError", "NumericalError", "ParseError",
    "DiscreteDistribution", "SinkhornConfig", "euclidean_cost", "sinkhorn", "solve_exact",
]
