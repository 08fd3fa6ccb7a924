"""Bounds on the value of untrialed decision policies from cluster-randomized trial data."""
from .bound_engine import CellTable, decompose_gap, exact_bounds
from .errors import TrialBoundsError
from .estimator import estimate_bounds, trialed_arm_value
from .falsification import run_all_pairs
from .policy_sets import EvaluationPolicy, SetMode, sets_at
from .trial_data import Registry, TrialDataset, load_dataset, load_registry

__all__ = [
    "CellTable",
    "EvaluationPolicy",
    "Registry",
    "SetMode",
    "TrialBoundsError",
    "TrialDataset",
    "decompose_gap",
    "estimate_bounds",
    "exact_bounds",
    "load_dataset",
    "load_registry",
    "run_all_pairs",
    "sets_at",
    "trialed_arm_value",
]
