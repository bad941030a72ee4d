"""Policy protocol over observable histories, plus episode runners.

A policy carries its own recurrent state (`pstate`): it is reset with the
initial observation and advanced with each (action, observation, reward)
triple, so by construction it can only condition on the observable history.
`state_key` returns a hashable summary when one exists (enables exact
evaluation with node merging); `static_distribution` marks policies whose
action law ignores the history entirely (enables vectorized evaluation).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import rng
from .env import PomdpModel, sample_initial, step


class Policy:
    def reset(self, o0: int):
        raise NotImplementedError

    def action_probs(self, pstate) -> np.ndarray:
        raise NotImplementedError

    def advance(self, pstate, action: int, observation: int, reward: float):
        raise NotImplementedError

    def state_key(self, pstate):
        return None

    def static_distribution(self) -> Optional[np.ndarray]:
        return None


class ConstantPolicy(Policy):
    """History-independent action distribution."""

    def __init__(self, probs):
        self.probs = np.asarray(probs, dtype=np.float64)
        if np.any(self.probs < 0) or abs(self.probs.sum() - 1.0) > 1e-10:
            raise ValueError("not a distribution")

    def reset(self, o0):
        return None

    def action_probs(self, pstate):
        return self.probs

    def advance(self, pstate, action, observation, reward):
        return None

    def state_key(self, pstate):
        return "const"

    def static_distribution(self):
        return self.probs


def uniform_policy(num_actions: int) -> ConstantPolicy:
    return ConstantPolicy(np.full(num_actions, 1.0 / num_actions))


class ScriptedPolicy(Policy):
    """Fixed action sequence (repeats the last action when exhausted)."""

    def __init__(self, num_actions: int, actions):
        self.num_actions = num_actions
        self.actions = tuple(actions)

    def reset(self, o0):
        return 0

    def action_probs(self, t):
        probs = np.zeros(self.num_actions)
        probs[self.actions[min(t, len(self.actions) - 1)]] = 1.0
        return probs

    def advance(self, t, action, observation, reward):
        return t + 1

    def state_key(self, t):
        return t


@dataclass
class EpisodeTrace:
    """One episode's observables plus per-step policy output."""

    observations: tuple        # o_0 .. o_T
    actions: tuple             # a_0 .. a_{T-1}
    rewards: tuple             # r_1 .. r_T
    action_probs: tuple        # behavior probability of each chosen action
    dists: tuple               # full behavior distribution per step
    terminal: bool             # episode ended in a terminal state (or horizon)

    @property
    def steps(self) -> int:
        return len(self.actions)

    def discounted_return(self, gamma: float) -> float:
        return float(sum(r * gamma**t for t, r in enumerate(self.rewards)))


def sample_action(probs: np.ndarray, stream: np.random.Generator) -> int:
    return rng.categorical(stream.random(), np.cumsum(probs))


def run_model_episode(model: PomdpModel, policy: Policy,
                      stream: np.random.Generator,
                      horizon: Optional[int] = None) -> EpisodeTrace:
    horizon = model.horizon if horizon is None else min(horizon, model.horizon)
    state, modality, o = sample_initial(model, stream)
    pstate = policy.reset(o)
    obs, acts, rews, probs, dists = [o], [], [], [], []
    terminal = bool(model.terminal_states[state])
    for _ in range(horizon):
        if terminal:
            break
        dist = policy.action_probs(pstate)
        a = sample_action(dist, stream)
        out = step(model, state, modality, a, stream)
        obs.append(out.observation)
        acts.append(a)
        rews.append(out.reward)
        probs.append(float(dist[a]))
        dists.append(np.array(dist))
        state, terminal = out.next_state, out.terminal
        if terminal:
            break
        pstate = policy.advance(pstate, a, out.observation, out.reward)
    return EpisodeTrace(tuple(obs), tuple(acts), tuple(rews), tuple(probs),
                        tuple(dists), terminal or len(acts) == horizon)


def run_instance_episode(instance, policy: Policy,
                         stream: np.random.Generator,
                         horizon: Optional[int] = None) -> EpisodeTrace:
    """Replay the instance's trajectory tree under the policy."""
    model = instance.model
    horizon = model.horizon if horizon is None else min(horizon, model.horizon)
    node = instance.root
    pstate = policy.reset(node.observation)
    prefix = ()
    obs, acts, rews, probs, dists = [node.observation], [], [], [], []
    terminal = node.terminal
    for _ in range(horizon):
        if terminal:
            break
        dist = policy.action_probs(pstate)
        a = sample_action(dist, stream)
        prefix = prefix + (a,)
        node = instance.node(prefix)
        obs.append(node.observation)
        acts.append(a)
        rews.append(node.reward)
        probs.append(float(dist[a]))
        dists.append(np.array(dist))
        terminal = node.terminal
        if terminal:
            break
        pstate = policy.advance(pstate, a, node.observation, node.reward)
    return EpisodeTrace(tuple(obs), tuple(acts), tuple(rews), tuple(probs),
                        tuple(dists), terminal or len(acts) == horizon)
