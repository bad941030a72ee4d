"""Tabular POMDP models and the two desk-scale environments.

A model is a finite POMDP with hidden states, a per-episode observation
modality drawn uniformly, finite reward support, and explicit tables:

    initial state     s0 ~ mu
    modality          k  ~ Uniform(K)
    initial obs       o0 ~ Obs[s0][no_action][k]
    transition        (r, s') ~ T[s][a]        (joint over reward-index x state)
    step obs          o ~ Obs[s'][a][k]

Terminal states are absorbing with zero reward; episodes additionally stop
at the horizon. All sampling is a pure function of the stream state.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import rng
from .errors import ModelValidationError, UsageError

PROB_ATOL = 1e-12

# corridor actions
ADVANCE, JUMP, WAIT = 0, 1, 2

_CORRIDOR_PERM_SEED = 0x1AB0C0FFEE


@dataclass
class PomdpModel:
    """Immutable tabular POMDP.

    transition:  (S, A, R, S) joint law of (reward-index, next state) per (s, a).
    observation: (S, A+1, K, O) law of the observation emitted on entering s'
                 after action a; index A is the reserved no-action slot used
                 for the initial observation.
    """

    name: str
    num_states: int
    num_actions: int
    num_modalities: int
    observation_space: int
    reward_support: np.ndarray
    initial_dist: np.ndarray
    transition: np.ndarray
    observation: np.ndarray
    discount: float
    horizon: int
    terminal_states: np.ndarray
    state_labels: Optional[tuple] = None

    # derived sampling tables
    cdf_initial: np.ndarray = field(init=False, repr=False)
    cdf_transition: np.ndarray = field(init=False, repr=False)
    cdf_observation: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.reward_support = np.asarray(self.reward_support, dtype=np.float64)
        self.initial_dist = np.asarray(self.initial_dist, dtype=np.float64)
        self.transition = np.asarray(self.transition, dtype=np.float64)
        self.observation = np.asarray(self.observation, dtype=np.float64)
        self.terminal_states = np.asarray(self.terminal_states, dtype=bool)
        self._validate()
        self.cdf_initial = np.cumsum(self.initial_dist)
        S, A = self.num_states, self.num_actions
        self.cdf_transition = np.cumsum(
            self.transition.reshape(S, A, -1), axis=-1)
        self.cdf_observation = np.cumsum(self.observation, axis=-1)
        for arr in (self.reward_support, self.initial_dist, self.transition,
                    self.observation, self.terminal_states, self.cdf_initial,
                    self.cdf_transition, self.cdf_observation):
            arr.setflags(write=False)

    def _validate(self):
        S, A, K, O = (self.num_states, self.num_actions,
                      self.num_modalities, self.observation_space)
        R = len(self.reward_support)
        if min(S, A, K, O, R) < 1:
            raise ModelValidationError("all cardinalities must be >= 1")
        if self.horizon < 1:
            raise ModelValidationError("horizon must be >= 1")
        if not (0.0 <= self.discount <= 1.0):
            raise ModelValidationError(f"discount {self.discount} outside [0, 1]")
        if not np.all(np.isfinite(self.reward_support)):
            raise ModelValidationError("reward support must be finite")
        if np.any(np.diff(self.reward_support) <= 0):
            raise ModelValidationError("reward support must be strictly increasing")
        if self.initial_dist.shape != (S,):
            raise ModelValidationError("initial_dist has wrong length")
        if self.transition.shape != (S, A, R, S):
            raise ModelValidationError("transition table has wrong shape")
        if self.observation.shape != (S, A + 1, K, O):
            raise ModelValidationError("observation table has wrong shape")
        if self.terminal_states.shape != (S,):
            raise ModelValidationError("terminal_states has wrong length")

        def check_rows(arr, what):
            if np.any(arr < 0):
                raise ModelValidationError(f"{what} has negative entries")
            sums = arr.reshape(-1, arr.shape[-1]).sum(axis=1) if arr.ndim > 1 \
                else np.array([arr.sum()])
            if np.any(np.abs(sums - 1.0) > PROB_ATOL):
                raise ModelValidationError(f"{what} rows do not sum to 1")

        check_rows(self.initial_dist, "initial_dist")
        check_rows(self.transition.reshape(S * A, R * S), "transition")
        check_rows(self.observation.reshape(-1, O), "observation")

        # terminal states must be absorbing with zero reward
        if np.any(self.terminal_states):
            zero = np.where(np.isclose(self.reward_support, 0.0))[0]
            if len(zero) == 0:
                raise ModelValidationError("terminal states require 0 in reward support")
            zi = int(zero[0])
            for s in np.flatnonzero(self.terminal_states):
                want = np.zeros((R, S))
                want[zi, s] = 1.0
                if not np.allclose(self.transition[s], want[None], atol=PROB_ATOL):
                    raise ModelValidationError(f"terminal state {s} is not absorbing")

    @property
    def no_action(self) -> int:
        return self.num_actions

    @property
    def max_reward(self) -> float:
        return float(self.reward_support[-1])

    def reward_index(self, reward: float) -> int:
        idx = int(np.argmin(np.abs(self.reward_support - reward)))
        if self.reward_support[idx] != reward:
            raise UsageError(f"reward {reward} not in support")
        return idx

    def value_bound(self) -> float:
        """max |V| over all policies and histories: Rmax * sum of discounts."""
        return abs_discounted_sum(self.max_reward, self.discount, self.horizon)

    def to_json_dict(self) -> dict:
        d = {
            "name": self.name,
            "num_states": self.num_states,
            "num_actions": self.num_actions,
            "num_modalities": self.num_modalities,
            "observation_space": self.observation_space,
            "reward_support": self.reward_support.tolist(),
            "initial_dist": self.initial_dist.tolist(),
            "transition": self.transition.tolist(),
            "observation": self.observation.tolist(),
            "discount": self.discount,
            "horizon": self.horizon,
            "terminal_states": self.terminal_states.astype(int).tolist(),
        }
        if self.state_labels is not None:
            d["state_labels"] = [list(map(str, lab)) for lab in self.state_labels]
        return d


@dataclass(frozen=True)
class StepOutcome:
    reward: float
    next_state: int
    observation: int
    terminal: bool


def abs_discounted_sum(r_max: float, gamma: float, horizon: int) -> float:
    if gamma == 1.0:
        return abs(r_max) * horizon
    return abs(r_max) * (1.0 - gamma**horizon) / (1.0 - gamma)


def sample_initial(model: PomdpModel, stream: np.random.Generator):
    """Draw (state, modality, initial observation) for a fresh episode."""
    state = rng.categorical(stream.random(), model.cdf_initial)
    modality = min(int(stream.random() * model.num_modalities),
                   model.num_modalities - 1)
    obs = rng.categorical(stream.random(),
                          model.cdf_observation[state, model.no_action, modality])
    return state, modality, obs


def step(model: PomdpModel, state: int, modality: int, action: int,
         stream: np.random.Generator) -> StepOutcome:
    """Sample one transition; stepping a terminal state is a usage error."""
    if not (0 <= state < model.num_states):
        raise UsageError(f"state {state} out of range")
    if not (0 <= action < model.num_actions):
        raise UsageError(f"action {action} out of range")
    if not (0 <= modality < model.num_modalities):
        raise UsageError(f"modality {modality} out of range")
    if model.terminal_states[state]:
        raise UsageError(f"cannot step terminal state {state}")
    flat = rng.categorical(stream.random(), model.cdf_transition[state, action])
    r_idx, next_state = divmod(flat, model.num_states)
    obs = rng.categorical(stream.random(),
                          model.cdf_observation[next_state, action, modality])
    return StepOutcome(
        reward=float(model.reward_support[r_idx]),
        next_state=int(next_state),
        observation=int(obs),
        terminal=bool(model.terminal_states[next_state]),
    )


def build_bandit(p_hi: float, p_lo: float, num_actions: int, horizon: int,
                 discount: float) -> PomdpModel:
    """Single-state sequential bandit: arm 0 pays 1 w.p. p_hi, others w.p. p_lo."""
    if not (p_hi > p_lo):
        raise ModelValidationError(f"need p_hi > p_lo, got {p_hi} <= {p_lo}")
    if not (0.0 <= p_lo and p_hi <= 1.0):
        raise ModelValidationError("arm probabilities outside [0, 1]")
    if num_actions < 2:
        raise ModelValidationError("bandit needs at least 2 actions")
    A = num_actions
    transition = np.zeros((1, A, 2, 1))
    for a in range(A):
        p = p_hi if a == 0 else p_lo
        transition[0, a, 1, 0] = p
        transition[0, a, 0, 0] = 1.0 - p
    observation = np.ones((1, A + 1, 1, 1))
    return PomdpModel(
        name=f"bandit(p_hi={p_hi},p_lo={p_lo},A={A},N={horizon},gamma={discount})",
        num_states=1,
        num_actions=A,
        num_modalities=1,
        observation_space=1,
        reward_support=np.array([0.0, 1.0]),
        initial_dist=np.array([1.0]),
        transition=transition,
        observation=observation,
        discount=discount,
        horizon=horizon,
        terminal_states=np.zeros(1, dtype=bool),
    )


def corridor_state_labels(length: int) -> tuple:
    labels = []
    for p in range(length - 1):
        labels.append(("ground", p, 0))
        labels.append(("ground", p, 1))
    labels.append(("ground", length - 1, 0))
    for p in range(length):
        labels.append(("air", p))
    labels.append(("goal",))
    labels.append(("dead",))
    return tuple(labels)


def build_gated_corridor(length: int, hazard_prob: float, num_modalities: int,
                         horizon: int, discount: float) -> PomdpModel:
    """Forward corridor with locally revealed hazards and a goal reward of 10.

    Positions 0..length-1 are walkable; position `length` is the goal. Hidden
    state is (position, hazard flag of the next cell) on the ground, or an
    airborne phase while mid-jump. Advancing into a hazard kills (reward 0,
    terminal); a jump takes off in place and lands one cell forward on the
    following step, clearing whatever hazard was there; waiting stays put.
    The hazard of each newly approached cell is drawn Bernoulli(hazard_prob);
    the cell in front of the goal entrance is never hazardous.

    Observations: the initial no-action observation shows only the modality
    theme (symbols 0..K-1); every step observation shows position plus the
    next cell's hazard status, re-rendered per modality into the theme's own
    block of state symbols (block k covers K + k*S .. K + (k+1)*S - 1, with
    the states permuted inside the block).
    """
    if length < 3:
        raise ModelValidationError("corridor length must be >= 3")
    if not (0.0 <= hazard_prob <= 1.0):
        raise ModelValidationError("hazard_prob outside [0, 1]")
    if num_modalities < 2:
        raise ModelValidationError("corridor needs >= 2 modalities")

    L, K, q = length, num_modalities, hazard_prob
    labels = corridor_state_labels(L)
    index = {lab: i for i, lab in enumerate(labels)}
    S = len(labels)
    A = 3
    support = np.array([0.0, 10.0])
    GOAL, DEAD = index[("goal",)], index[("dead",)]

    def ground(p, h):
        return index[("ground", p, h)] if p < L - 1 else index[("ground", L - 1, 0)]

    def enter_ground(p_new):
        """distribution over (r_idx, s) entries for walking/landing on p_new"""
        if p_new == L:
            return [(1, GOAL, 1.0)]
        if p_new == L - 1:
            return [(0, ground(p_new, 0), 1.0)]
        return [(0, ground(p_new, 0), 1.0 - q), (0, ground(p_new, 1), q)]

    transition = np.zeros((S, A, 2, S))
    for p in range(L):
        hs = (0, 1) if p < L - 1 else (0,)
        for h in hs:
            s = ground(p, h)
            if h == 1:
                transition[s, ADVANCE, 0, DEAD] = 1.0
            else:
                for r_idx, s2, prob in enter_ground(p + 1):
                    transition[s, ADVANCE, r_idx, s2] += prob
            transition[s, JUMP, 0, index[("air", p)]] = 1.0
            transition[s, WAIT, 0, s] = 1.0
        air = index[("air", p)]
        for a in range(A):
            for r_idx, s2, prob in enter_ground(p + 1):
                transition[air, a, r_idx, s2] += prob
    for t in (GOAL, DEAD):
        for a in range(A):
            transition[t, a, 0, t] = 1.0

    # observation symbols: K themes, then one permuted state block per theme
    O = K + K * S
    observation = np.zeros((S, A + 1, K, O))
    for k in range(K):
        if k == 0:
            perm = np.arange(S)
        else:
            g = np.random.Generator(np.random.PCG64(
                rng.derive_seed(_CORRIDOR_PERM_SEED, "corridor-perm", k)))
            perm = g.permutation(S)
        for s in range(S):
            observation[s, :A, k, K + k * S + perm[s]] = 1.0
            observation[s, A, k, k] = 1.0  # initial observation reveals the theme

    initial = np.zeros(S)
    initial[ground(0, 0)] = 1.0 - q
    initial[ground(0, 1)] = q

    terminal = np.zeros(S, dtype=bool)
    terminal[[GOAL, DEAD]] = True

    return PomdpModel(
        name=(f"corridor(L={L},q={q},K={K},N={horizon},gamma={discount})"),
        num_states=S,
        num_actions=A,
        num_modalities=K,
        observation_space=O,
        reward_support=support,
        initial_dist=initial,
        transition=transition,
        observation=observation,
        discount=discount,
        horizon=horizon,
        terminal_states=terminal,
        state_labels=labels,
    )
