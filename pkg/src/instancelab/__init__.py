"""Desk-scale laboratory for level reuse in tabular POMDPs.

Builds finite POMDPs, realizes reusable levels as deterministic seeded
trajectory trees, filters exact beliefs, solves exact DP oracles over both
the model and instance sets, trains ensemble policies with consensus
collection and clipped importance-weighted off-policy targets, and verifies
the library's quantitative claims against the oracles.
"""

__version__ = "0.1.0"

from .belief import ExactBelief, ObservableHistory, belief_from_history, init_belief, update_belief
from .env import PomdpModel, StepOutcome, build_bandit, build_gated_corridor, sample_initial, step
from .errors import (BudgetExceededError, InstanceLabError, ModelValidationError,
                     NoCompatibleInstanceError, NonFiniteError, UsageError,
                     ZeroLikelihoodError)
from .instance import (FullHistory, Instance, InstanceSet, NodeRecord,
                       instance_posterior, instance_set_transition,
                       spawn_instance, verify_expected_transition)
from .reports import ValueReport, VerificationReport

__all__ = [
    "__version__",
    "ExactBelief", "ObservableHistory", "belief_from_history", "init_belief",
    "update_belief",
    "PomdpModel", "StepOutcome", "build_bandit", "build_gated_corridor",
    "sample_initial", "step",
    "BudgetExceededError", "InstanceLabError", "ModelValidationError",
    "NoCompatibleInstanceError", "NonFiniteError", "UsageError",
    "ZeroLikelihoodError",
    "FullHistory", "Instance", "InstanceSet", "NodeRecord",
    "instance_posterior", "instance_set_transition", "spawn_instance",
    "verify_expected_transition",
    "ValueReport", "VerificationReport",
]
