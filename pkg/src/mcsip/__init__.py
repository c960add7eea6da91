"""Aggregation-based solvers for multi-stage stochastic integer programs
driven by Markov-chain uncertainty."""

from .aggregate import AggregationMap, PolicyGraph, Transformation, \
    build_aggregation, build_phi, build_policy_graph, refines
from .markov import MarkovChain, McState, reachable_states, transition_prob
from .model import Msilp, NodeData, build_aggregated_extensive_form, \
    build_extensive_form, validate
from .sddp import SddpConfig, evaluate_policy, solve_exact, solve_lower_bound
from .tree import ScenarioTree, build_tree, mc_history, path

__all__ = [
    "AggregationMap", "MarkovChain", "McState", "Msilp", "NodeData",
    "PolicyGraph", "ScenarioTree", "SddpConfig", "Transformation",
    "build_aggregated_extensive_form", "build_aggregation",
    "build_extensive_form", "build_phi", "build_policy_graph", "build_tree",
    "evaluate_policy", "mc_history", "path", "reachable_states", "refines",
    "solve_exact", "solve_lower_bound", "transition_prob", "validate",
]

__version__ = "0.1.0"
