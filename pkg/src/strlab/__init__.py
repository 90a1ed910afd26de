"""Tabular supported trust-region policy iteration for offline reinforcement learning."""

from .algorithms import IterationTrace, run_variant, str_tabular, support_constrained_optimum, variant
from .data import SupportMask, TransitionDataset, empirical_mdp, estimate_behavior, rollout_dataset
from .envs import MazeSpec, build_maze, build_random_mdp
from .fqe import FeatureMap, FqeBoundInputs, fqe_bound, fqe_run
from .mdp import TabularMdp, TabularPolicy, exact_q, occupancy, performance
from .theory import BoundReport
from .update import ConstrainedUpdateConfig, PenaltyUpdateConfig, constrained_update, dual_solve, penalty_update

__all__ = [
    "BoundReport",
    "ConstrainedUpdateConfig",
    "FeatureMap",
    "FqeBoundInputs",
    "IterationTrace",
    "MazeSpec",
    "PenaltyUpdateConfig",
    "SupportMask",
    "TabularMdp",
    "TabularPolicy",
    "TransitionDataset",
    "build_maze",
    "build_random_mdp",
    "constrained_update",
    "dual_solve",
    "empirical_mdp",
    "estimate_behavior",
    "exact_q",
    "fqe_bound",
    "fqe_run",
    "occupancy",
    "penalty_update",
    "performance",
    "rollout_dataset",
    "run_variant",
    "str_tabular",
    "support_constrained_optimum",
    "variant",
]
