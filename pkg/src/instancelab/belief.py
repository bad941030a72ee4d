"""Exact Bayes filtering of (hidden state, modality) given observable histories.

The joint posterior over (s, k) is a sufficient statistic for control, and is
computed recursively: conditioning on the initial observation, then folding
one (action, observation, reward) triple at a time. Histories with zero
likelihood raise instead of silently renormalizing, since an impossible
history almost always signals a model/instance mismatch.
"""

from __future__ import annotations

from dataclasses import dataclass
import numpy as np

from .env import PomdpModel
from .errors import UsageError, ZeroLikelihoodError

NORM_ATOL = 1e-10
DEDUP_TOL = 1e-9


@dataclass(frozen=True)
class ObservableHistory:
    """H^o_t: actions a_0:t-1, observations o_0:t, rewards r_1:t."""

    actions: tuple
    observations: tuple
    rewards: tuple

    def __post_init__(self):
        t = len(self.actions)
        if not (len(self.observations) == t + 1 and len(self.rewards) == t):
            raise UsageError("inconsistent observable-history lengths")

    @staticmethod
    def empty_at(o0: int) -> "ObservableHistory":
        return ObservableHistory((), (o0,), ())

    def extended(self, action: int, observation: int, reward: float):
        return ObservableHistory(self.actions + (action,),
                                 self.observations + (observation,),
                                 self.rewards + (reward,))


@dataclass(frozen=True)
class ExactBelief:
    """Joint posterior over (state, modality); rows states, columns modalities."""

    joint: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "joint", np.asarray(self.joint, dtype=np.float64))
        self.joint.setflags(write=False)
        if np.any(self.joint < 0) or abs(self.joint.sum() - 1.0) > NORM_ATOL:
            raise UsageError("belief is not a normalized joint table")

    def state_marginal(self) -> np.ndarray:
        return self.joint.sum(axis=1)

    def modality_marginal(self) -> np.ndarray:
        return self.joint.sum(axis=0)

    def key(self, tol: float = DEDUP_TOL) -> bytes:
        """Quantized content key used to deduplicate dynamic-programming nodes."""
        return np.round(self.joint / tol).astype(np.int64).tobytes()


def init_belief(model: PomdpModel, o0: int) -> ExactBelief:
    """Prior mu x Uniform(K) conditioned on the initial observation."""
    if not (0 <= o0 < model.observation_space):
        raise UsageError(f"observation {o0} out of range")
    joint = (model.initial_dist[:, None] / model.num_modalities
             * model.observation[:, model.no_action, :, o0])
    total = joint.sum()
    if total <= 0.0:
        raise ZeroLikelihoodError(f"initial observation {o0} impossible")
    return ExactBelief(joint / total)


def update_belief(model: PomdpModel, belief: ExactBelief, action: int,
                  observation: int, reward: float) -> ExactBelief:
    """One Bayes step: joint'[s',k] prop. sum_s joint[s,k] T[s,a](r,s') Obs[s',a,k](o)."""
    if not (0 <= action < model.num_actions):
        raise UsageError(f"action {action} out of range")
    if not (0 <= observation < model.observation_space):
        raise UsageError(f"observation {observation} out of range")
    r_idx = model.reward_index(reward)
    propagated = model.transition[:, action, r_idx, :].T @ belief.joint
    joint = propagated * model.observation[:, action, :, observation]
    total = joint.sum()
    if total <= 0.0:
        raise ZeroLikelihoodError(
            f"(a={action}, o={observation}, r={reward}) impossible given belief")
    return ExactBelief(joint / total)


def belief_from_history(model: PomdpModel, h: ObservableHistory) -> ExactBelief:
    """Left fold of init_belief and update_belief over the history."""
    b = init_belief(model, h.observations[0])
    for t, a in enumerate(h.actions):
        b = update_belief(model, b, a, h.observations[t + 1], h.rewards[t])
    return b
