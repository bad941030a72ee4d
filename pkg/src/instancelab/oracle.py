"""Exact dynamic-programming solvers, evaluators, and quantitative verifiers.

Everything here is an oracle: values are computed by enumeration or backward
induction, not by learning, and serve as the ground truth the statistical and
training checks are measured against.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from . import _kernels, rng
from .belief import ExactBelief, init_belief, update_belief
from .env import PomdpModel, abs_discounted_sum
from .errors import BudgetExceededError, UsageError, ZeroLikelihoodError
from .instance import (Instance, InstanceSet, NodeRecord,
                       children_all_actions)
from .policies import Policy, run_instance_episode, run_model_episode
from .reports import ValueReport, VerificationReport

DEFAULT_NODE_BUDGET = 2_000_000


def initial_obs_dist(model: PomdpModel) -> np.ndarray:
    """P(o_0) marginalized over the initial state and modality."""
    prior = model.initial_dist[:, None] / model.num_modalities
    return np.einsum("sk,sko->o", prior, model.observation[:, model.no_action])


def continue_belief(model: PomdpModel, belief: ExactBelief, action: int,
                    observation: int, reward: float) -> ExactBelief:
    """Bayes step conditioned on the episode continuing (non-terminal arrival)."""
    b = update_belief(model, belief, action, observation, reward)
    joint = np.array(b.joint)
    joint[model.terminal_states, :] = 0.0
    total = joint.sum()
    if total <= 0.0:
        raise ZeroLikelihoodError("no non-terminal state consistent with the step")
    return ExactBelief(joint / total)


def _belief_step(model: PomdpModel, belief: ExactBelief, action: int):
    """Outcome decomposition of one action from a belief.

    Returns (terminal_value, branches): terminal_value is the expected
    immediate reward collected on transitions into terminal states; branches
    is a list of (prob, reward, observation, next_belief) for the continuing
    outcomes, with next_belief conditioned on survival.
    """
    # w[r, s2, k] = sum_s b[s,k] T[s,a](r,s2)
    w = np.einsum("sk,srx->rxk", belief.joint, model.transition[:, action])
    p = w[:, :, :, None] * model.observation[None, :, action, :, :]
    term = model.terminal_states
    term_value = float(np.einsum("r,rxko->", model.reward_support, p[:, term]))
    mass_ro = p[:, ~term].sum(axis=(1, 2))
    branches = []
    for r_idx, o in zip(*np.nonzero(mass_ro)):
        reward = float(model.reward_support[r_idx])
        nxt = continue_belief(model, belief, action, int(o), reward)
        branches.append((float(mass_ro[r_idx, o]), reward, int(o), nxt))
    return term_value, branches


class BeliefPolicy(Policy):
    """Policy over deduplicated belief nodes, one table per depth."""

    def __init__(self, model: PomdpModel, horizon: int, table: dict):
        self.model = model
        self.horizon = horizon
        self.table = table  # (depth, belief key) -> action distribution

    def reset(self, o0: int):
        return (init_belief(self.model, o0), 0)

    def action_probs(self, pstate):
        belief, t = pstate
        key = (t, belief.key())
        if key not in self.table:
            raise UsageError("belief node outside the solved policy support")
        return self.table[key]

    def advance(self, pstate, action, observation, reward):
        belief, t = pstate
        return (continue_belief(self.model, belief, action, observation, reward),
                t + 1)

    def state_key(self, pstate):
        belief, t = pstate
        return (t, belief.key())


def solve_pomdp_optimal(model: PomdpModel, horizon: Optional[int] = None,
                        node_budget: int = DEFAULT_NODE_BUDGET,
                        include_node_values: bool = False):
    """Backward induction over the reachable belief tree with node dedup.

    Returns (BeliefPolicy, ValueReport); the report's value is the optimal
    value of the empty history.
    """
    horizon = model.horizon if horizon is None else min(horizon, model.horizon)
    memo: dict = {}
    table: dict = {}
    nodes = [0]

    def V(belief: ExactBelief, t: int) -> float:
        if t >= horizon:
            return 0.0
        key = (t, belief.key())
        if key in memo:
            return memo[key]
        nodes[0] += 1
        if nodes[0] > node_budget:
            raise BudgetExceededError(nodes[0], node_budget)
        best, best_a = -math.inf, 0
        for a in range(model.num_actions):
            term_value, branches = _belief_step(model, belief, a)
            q = term_value
            for prob, reward, _o, nxt in branches:
                q += prob * (reward + model.discount * V(nxt, t + 1))
            if q > best:
                best, best_a = q, a
        dist = np.zeros(model.num_actions)
        dist[best_a] = 1.0
        table[key] = dist
        memo[key] = best
        return best

    p0 = initial_obs_dist(model)
    value = 0.0
    roots = {}
    for o0 in np.nonzero(p0)[0]:
        b0 = init_belief(model, int(o0))
        v = V(b0, 0)
        roots[int(o0)] = v
        value += p0[o0] * v
    report = ValueReport(
        value_at_empty=float(value), nodes_expanded=nodes[0], depth=horizon,
        per_node_values=roots if include_node_values else None)
    return BeliefPolicy(model, horizon, table), report


# ---------------------------------------------------------------------------
# instance-set optimal control
# ---------------------------------------------------------------------------

def _mask_bits(mask: int):
    i = 0
    while mask:
        if mask & 1:
            yield i
        mask >>= 1
        i += 1


class InstanceOptimalPolicy(Policy):
    """Deterministic policy over (action prefix, compatible-instance bitmask).

    Falls back to the uniform distribution once the observed history is
    incompatible with every instance (which happens routinely when the policy
    is deployed on the true model).
    """

    FALLBACK = ("fallback",)

    def __init__(self, iset: InstanceSet, table: dict, horizon: int):
        self.iset = iset
        self.table = table  # (prefix, mask) -> action distribution
        self.horizon = horizon
        self.num_actions = iset.model.num_actions
        self._uniform = np.full(self.num_actions, 1.0 / self.num_actions)

    def reset(self, o0: int):
        mask = 0
        for i, inst in enumerate(self.iset.instances):
            if inst.root.observation == o0 and not inst.root.terminal:
                mask |= 1 << i
        return ((), mask) if mask else self.FALLBACK

    def action_probs(self, pstate):
        if pstate == self.FALLBACK:
            return self._uniform
        return self.table[pstate]

    def advance(self, pstate, action, observation, reward):
        if pstate == self.FALLBACK:
            return pstate
        prefix, mask = pstate
        new_prefix = prefix + (action,)
        new_mask = 0
        for i in _mask_bits(mask):
            child = self.iset[i].node(new_prefix)
            if (child.observation == observation and child.reward == reward
                    and not child.terminal):
                new_mask |= 1 << i
        if not new_mask or len(new_prefix) >= self.horizon:
            return self.FALLBACK
        return (new_prefix, new_mask)

    def state_key(self, pstate):
        return pstate


class SingletonTreePolicy(Policy):
    """Greedy policy over one instance's trajectory tree, stored level-wise."""

    def __init__(self, instance: Instance, levels: list, horizon: int):
        # levels[t]: dict(chains, states, greedy, slot) packed per alive node
        self.instance = instance
        self.levels = levels
        self.horizon = horizon
        model = instance.model
        self.num_actions = model.num_actions
        self._uniform = np.full(self.num_actions, 1.0 / self.num_actions)

    def reset(self, o0: int):
        root = self.instance.root
        if root.observation == o0 and not root.terminal and self.levels:
            return (0, 0)
        return InstanceOptimalPolicy.FALLBACK

    def action_probs(self, pstate):
        if pstate == InstanceOptimalPolicy.FALLBACK:
            return self._uniform
        t, pos = pstate
        dist = np.zeros(self.num_actions)
        dist[int(self.levels[t]["greedy"][pos])] = 1.0
        return dist

    def advance(self, pstate, action, observation, reward):
        if pstate == InstanceOptimalPolicy.FALLBACK:
            return pstate
        t, pos = pstate
        lvl = self.levels[t]
        if action != int(lvl["greedy"][pos]):
            return InstanceOptimalPolicy.FALLBACK
        model = self.instance.model
        chain = rng.chain_absorb(int(lvl["chains"][pos]), action)
        key = rng.node_key(chain, t + 1)
        flat = rng.categorical(rng.key_uniform(key, 0),
                               model.cdf_transition[int(lvl["states"][pos]), action])
        r_idx, s2 = divmod(flat, model.num_states)
        obs = rng.categorical(
            rng.key_uniform(key, 1),
            model.cdf_observation[s2, action, self.instance.modality])
        slot = int(lvl["slot"][pos])
        if (obs != observation or model.reward_support[r_idx] != reward
                or model.terminal_states[s2] or slot < 0):
            return InstanceOptimalPolicy.FALLBACK
        return (t + 1, slot)

    def state_key(self, pstate):
        return pstate


def _solve_singleton_tree(instance: Instance, horizon: int, node_budget: int):
    """Vectorized level-wise DP over one instance's full trajectory tree."""
    model = instance.model
    A = model.num_actions
    root = instance.root
    if root.terminal or horizon == 0:
        return SingletonTreePolicy(instance, [], horizon), ValueReport(
            value_at_empty=0.0, nodes_expanded=1, depth=horizon)

    chains = np.array([rng.chain_root(instance.instance_seed)], dtype=np.uint64)
    states = np.array([root.state], dtype=np.int64)
    levels = []
    nodes = 0
    for t in range(horizon):
        n = len(chains)
        nodes += n
        if nodes > node_budget:
            raise BudgetExceededError(nodes, node_budget)
        ch, rew, st, _o, term = children_all_actions(
            model, chains, states, instance.modality, t + 1)
        expand = ~term if t + 1 < horizon else np.zeros_like(term)
        slot_flat = np.cumsum(expand.ravel()) - 1
        slot = np.where(expand.ravel(), slot_flat, -1).reshape(n, A)
        levels.append({"chains": chains, "states": states, "rewards": rew,
                       "terminal": term, "slotfull": slot})
        keep = expand.ravel()
        chains, states = ch.ravel()[keep], st.ravel()[keep]

    v_next = np.zeros(len(chains))
    for t in range(horizon - 1, -1, -1):
        lvl = levels[t]
        if len(v_next) == 0:
            cont = np.zeros_like(lvl["rewards"])
        else:
            cont = np.where(lvl["slotfull"] >= 0,
                            v_next[np.maximum(lvl["slotfull"], 0)], 0.0)
        q = lvl["rewards"] + model.discount * np.where(lvl["terminal"], 0.0, cont)
        greedy = q.argmax(axis=1)
        v_next = q[np.arange(len(q)), greedy]
        lvl["greedy"] = greedy.astype(np.int8)
        lvl["slot"] = lvl["slotfull"][np.arange(len(q)), greedy]
        del lvl["rewards"], lvl["terminal"], lvl["slotfull"]
    value = float(v_next[0])
    return (SingletonTreePolicy(instance, levels, horizon),
            ValueReport(value_at_empty=value, nodes_expanded=nodes, depth=horizon))


def solve_instance_optimal(iset: InstanceSet, horizon: Optional[int] = None,
                           node_budget: int = DEFAULT_NODE_BUDGET,
                           force_general: bool = False):
    """Backward induction over (action prefix, compatible subset) info states.

    The transition law is the exact instance-set mixture; the posterior over
    compatible instances is uniform. Returns (policy, ValueReport) with the
    optimal instance-set value of the empty history.
    """
    model = iset.model
    horizon = model.horizon if horizon is None else min(horizon, model.horizon)
    if len(iset) == 1 and not force_general:
        return _solve_singleton_tree(iset[0], horizon, node_budget)

    instances = iset.instances
    memo: dict = {}
    table: dict = {}
    nodes = [0]

    def V(prefix: tuple, mask: int, t: int) -> float:
        if t >= horizon:
            return 0.0
        key = (prefix, mask)
        if key in memo:
            return memo[key]
        nodes[0] += 1
        if nodes[0] > node_budget:
            raise BudgetExceededError(nodes[0], node_budget)
        size = sum(1 for _ in _mask_bits(mask))
        best, best_a = -math.inf, 0
        for a in range(model.num_actions):
            child_prefix = prefix + (a,)
            groups: dict = {}
            for i in _mask_bits(mask):
                rec = instances[i].node(child_prefix)
                gkey = (rec.reward, rec.observation, rec.terminal)
                groups[gkey] = groups.get(gkey, 0) | (1 << i)
            q = 0.0
            for (reward, _obs, terminal), gmask in groups.items():
                w = sum(1 for _ in _mask_bits(gmask)) / size
                cont = 0.0 if terminal else V(child_prefix, gmask, t + 1)
                q += w * (reward + model.discount * cont)
            if q > best:
                best, best_a = q, a
        dist = np.zeros(model.num_actions)
        dist[best_a] = 1.0
        table[key] = dist
        memo[key] = best
        return best

    root_groups: dict = {}
    value = 0.0
    for i, inst in enumerate(instances):
        if inst.root.terminal:
            continue  # contributes value 0
        root_groups.setdefault(inst.root.observation, 0)
        root_groups[inst.root.observation] |= 1 << i
    for _o0, mask in sorted(root_groups.items()):
        w = sum(1 for _ in _mask_bits(mask)) / len(instances)
        value += w * V((), mask, 0)
    report = ValueReport(value_at_empty=float(value), nodes_expanded=nodes[0],
                         depth=horizon)
    return InstanceOptimalPolicy(iset, table, horizon), report


# ---------------------------------------------------------------------------
# policy evaluation
# ---------------------------------------------------------------------------

def _exact_model_value(model: PomdpModel, policy: Policy, horizon: int,
                       node_budget: int, prune_mass: float):
    memo: dict = {}
    nodes = [0]
    truncated = [0.0]

    def V(belief: ExactBelief, pstate, t: int, mass: float) -> float:
        if t >= horizon:
            return 0.0
        pkey = policy.state_key(pstate)
        mkey = None
        if pkey is not None:
            mkey = (t, pkey, belief.key())
            if mkey in memo:
                return memo[mkey]
        elif prune_mass > 0.0 and mass < prune_mass:
            truncated[0] += mass
            return 0.0
        nodes[0] += 1
        if nodes[0] > node_budget:
            raise BudgetExceededError(nodes[0], node_budget)
        dist = policy.action_probs(pstate)
        total = 0.0
        for a in np.nonzero(dist)[0]:
            a = int(a)
            term_value, branches = _belief_step(model, belief, a)
            q = term_value
            for prob, reward, o, nxt in branches:
                child_state = policy.advance(pstate, a, o, reward)
                q += prob * (reward + model.discount
                             * V(nxt, child_state, t + 1, mass * dist[a] * prob))
            total += dist[a] * q
        if mkey is not None:
            memo[mkey] = total
        return total

    p0 = initial_obs_dist(model)
    value = 0.0
    for o0 in np.nonzero(p0)[0]:
        b0 = init_belief(model, int(o0))
        value += p0[o0] * V(b0, policy.reset(int(o0)), 0, float(p0[o0]))
    return float(value), nodes[0], truncated[0]


def _belief_automaton(model: PomdpModel, policy: Policy, horizon: int,
                      node_budget: int):
    """Finite automaton over (policy state, belief) nodes for fast sampling.

    Valid because the (r, o, terminal) outcome law given the belief equals the
    model's marginal law given the history. Nodes are keyed by the policy's
    state key; returns None when any encountered state lacks a key.
    """
    p0 = initial_obs_dist(model)
    index: dict = {}
    nodes = []  # (belief, pstate, depth)
    init = []   # (prob, node_idx)

    def intern(belief, pstate, depth):
        pkey = policy.state_key(pstate)
        if pkey is None:
            return None
        key = (depth, pkey, belief.key())
        if key not in index:
            if len(nodes) >= node_budget:
                raise BudgetExceededError(len(nodes) + 1, node_budget)
            index[key] = len(nodes)
            nodes.append((belief, pstate, depth))
        return index[key]

    for o0 in np.nonzero(p0)[0]:
        b0 = init_belief(model, int(o0))
        idx = intern(b0, policy.reset(int(o0)), 0)
        if idx is None:
            return None
        init.append((float(p0[o0]), idx))

    act_rows, out_rows = [], []
    i = 0
    while i < len(nodes):
        belief, pstate, depth = nodes[i]
        if depth >= horizon:
            act_rows.append(np.full(model.num_actions,
                                    1.0 / model.num_actions))
            out_rows.append([[] for _ in range(model.num_actions)])
            i += 1
            continue
        dist = policy.action_probs(pstate)
        acts = []
        for a in range(model.num_actions):
            if dist[a] == 0.0 or depth >= horizon:
                acts.append([])
                continue
            term_value, branches = _belief_step(model, belief, a)
            outs = []
            # terminal outcomes: group into one absorbing branch per reward
            w = np.einsum("sk,srx->rxk", belief.joint,
                          model.transition[:, a])
            term_mass = w[:, model.terminal_states].sum(axis=(1, 2))
            for r_idx in np.nonzero(term_mass)[0]:
                outs.append((float(term_mass[r_idx]),
                             float(model.reward_support[r_idx]), -1))
            for prob, reward, o, nxt in branches:
                child = policy.advance(pstate, a, o, reward)
                cidx = intern(nxt, child, depth + 1)
                if cidx is None:
                    return None
                outs.append((prob, reward, cidx))
            acts.append(outs)
        act_rows.append(np.asarray(dist, dtype=np.float64))
        out_rows.append(acts)
        i += 1

    N, A = len(nodes), model.num_actions
    omax = max((len(o) for acts in out_rows for o in acts), default=1) or 1
    act_cdf = np.cumsum(np.stack(act_rows), axis=1)
    out_cdf = np.ones((N, A, omax))
    out_rew = np.zeros((N, A, omax))
    out_nxt = np.full((N, A, omax), -1, dtype=np.int64)
    for ni, acts in enumerate(out_rows):
        for a, outs in enumerate(acts):
            if not outs:
                continue
            probs = np.array([p for p, _r, _n in outs])
            out_cdf[ni, a, :len(outs)] = np.cumsum(probs) / probs.sum()
            out_cdf[ni, a, len(outs):] = 1.0
            out_rew[ni, a, :len(outs)] = [r for _p, r, _n in outs]
            out_nxt[ni, a, :len(outs)] = [n for _p, _r, n in outs]
    init_probs = np.array([p for p, _ in init])
    init_nodes = np.array([n for _, n in init], dtype=np.int64)
    return {"act_cdf": act_cdf, "out_cdf": out_cdf, "out_rew": out_rew,
            "out_nxt": out_nxt, "init_cdf": np.cumsum(init_probs),
            "init_nodes": init_nodes, "n_nodes": N}


def _mc_automaton(model: PomdpModel, auto: dict, n_episodes: int,
                  stream: np.random.Generator, horizon: int):
    pick = rng.categorical_rows(
        stream.random(n_episodes),
        np.broadcast_to(auto["init_cdf"], (n_episodes, len(auto["init_cdf"]))))
    cur = auto["init_nodes"][pick]
    returns = np.zeros(n_episodes)
    disc = 1.0
    for _t in range(horizon):
        idx = np.nonzero(cur >= 0)[0]
        if len(idx) == 0:
            break
        acts = rng.categorical_rows(stream.random(len(idx)),
                                    auto["act_cdf"][cur[idx]])
        outs = rng.categorical_rows(stream.random(len(idx)),
                                    auto["out_cdf"][cur[idx], acts])
        returns[idx] += disc * auto["out_rew"][cur[idx], acts, outs]
        cur[idx] = auto["out_nxt"][cur[idx], acts, outs]
        disc *= model.discount
    mean = float(returns.mean())
    se = float(returns.std(ddof=1) / math.sqrt(n_episodes)) if n_episodes > 1 else None
    return mean, se


def _mc_model_static(model: PomdpModel, probs: np.ndarray, n_episodes: int,
                     stream: np.random.Generator, horizon: int):
    """Vectorized Monte-Carlo for history-independent policies."""
    states = rng.categorical_rows(stream.random(n_episodes),
                                  np.broadcast_to(model.cdf_initial,
                                                  (n_episodes, model.num_states)))
    cdf_a = np.cumsum(probs)
    returns = np.zeros(n_episodes)
    alive = ~model.terminal_states[states]
    disc = 1.0
    for _t in range(horizon):
        idx = np.nonzero(alive)[0]
        if len(idx) == 0:
            break
        acts = rng.categorical_rows(stream.random(len(idx)),
                                    np.broadcast_to(cdf_a, (len(idx), len(cdf_a))))
        flat = rng.categorical_rows(stream.random(len(idx)),
                                    model.cdf_transition[states[idx], acts])
        r_idx, s2 = np.divmod(flat, model.num_states)
        returns[idx] += disc * model.reward_support[r_idx]
        states[idx] = s2
        alive[idx] = ~model.terminal_states[s2]
        disc *= model.discount
    mean = float(returns.mean())
    se = float(returns.std(ddof=1) / math.sqrt(n_episodes)) if n_episodes > 1 else None
    return mean, se


def evaluate_policy_on_model(model: PomdpModel, policy: Policy,
                             mode: str = "exact", n_episodes: int = 0,
                             seed: int = 0, horizon: Optional[int] = None,
                             node_budget: int = DEFAULT_NODE_BUDGET,
                             prune_mass: float = 0.0) -> ValueReport:
    """V_pi of the empty history on the true model.

    Exact mode sums over the belief-annotated history tree (merging nodes when
    the policy exposes a state key); Monte-Carlo averages fresh episodes.
    """
    horizon = model.horizon if horizon is None else min(horizon, model.horizon)
    if mode == "monte-carlo":
        if n_episodes <= 0:
            raise UsageError("n_episodes must be positive in monte-carlo mode")
        static = policy.static_distribution()
        stream = rng.stream(seed, "mc-model")
        if static is not None:
            mean, se = _mc_model_static(model, static, n_episodes, stream, horizon)
        else:
            auto = None
            try:
                auto = _belief_automaton(model, policy, horizon, node_budget)
            except (UsageError, BudgetExceededError):
                auto = None  # policy undefined off-support, or too large
            if auto is not None:
                mean, se = _mc_automaton(model, auto, n_episodes, stream,
                                         horizon)
            else:
                rets = np.array([
                    run_model_episode(model, policy, stream, horizon)
                    .discounted_return(model.discount)
                    for _ in range(n_episodes)])
                mean = float(rets.mean())
                se = (float(rets.std(ddof=1) / math.sqrt(n_episodes))
                      if n_episodes > 1 else None)
        return ValueReport(value_at_empty=mean, stderr=se, depth=horizon,
                           nodes_expanded=n_episodes, seed=seed)
    if mode != "exact":
        raise UsageError(f"unknown mode {mode!r}")
    value, nodes, trunc = _exact_model_value(model, policy, horizon,
                                             node_budget, prune_mass)
    return ValueReport(value_at_empty=value, nodes_expanded=nodes,
                       depth=horizon, truncated_mass=trunc)


def _instance_value_static(model: PomdpModel, instance: Instance,
                           probs: np.ndarray, horizon: int, node_budget: int):
    """Exact value of a history-independent policy on one trajectory tree.

    Forward level-wise sweep: tracks the reach probability of every alive
    node, accumulating discounted expected rewards.
    """
    root = instance.root
    if root.terminal or horizon == 0:
        return 0.0, 1
    A = model.num_actions
    if (_kernels.HAVE_NUMBA and model.num_states == 1
            and not model.terminal_states.any()):
        cdf = np.ascontiguousarray(model.cdf_transition[0, :, :])
        value, nodes = _kernels._static_value_single_state(
            np.uint64(rng.chain_root(instance.instance_seed)), cdf,
            model.reward_support, np.asarray(probs, dtype=np.float64),
            model.discount, horizon, node_budget)
        if nodes < 0:
            raise BudgetExceededError(node_budget + 1, node_budget)
        return float(value), int(nodes)
    chains = np.array([rng.chain_root(instance.instance_seed)], dtype=np.uint64)
    states = np.array([root.state], dtype=np.int64)
    reach = np.ones(1)
    value = 0.0
    disc = 1.0
    nodes = 0
    for t in range(horizon):
        n = len(chains)
        nodes += n
        if nodes > node_budget:
            raise BudgetExceededError(nodes, node_budget)
        ch, rew, st, _o, term = children_all_actions(
            model, chains, states, instance.modality, t + 1)
        w = reach[:, None] * probs[None, :]
        value += disc * float((w * rew).sum())
        disc *= model.discount
        if t + 1 == horizon:
            break
        keep = (~term & (w > 0)).ravel()
        if not keep.any():
            break
        chains = ch.ravel()[keep]
        states = st.ravel()[keep]
        reach = w.ravel()[keep]
    return value, nodes


def _exact_instance_value(instance: Instance, policy: Policy, horizon: int,
                          node_budget: int, prune_mass: float):
    model = instance.model
    nodes = [0]
    truncated = [0.0]

    def V(prefix: tuple, pstate, t: int, mass: float) -> float:
        if t >= horizon:
            return 0.0
        if prune_mass > 0.0 and mass < prune_mass:
            truncated[0] += mass
            return 0.0
        nodes[0] += 1
        if nodes[0] > node_budget:
            raise BudgetExceededError(nodes[0], node_budget)
        dist = policy.action_probs(pstate)
        total = 0.0
        for a in np.nonzero(dist)[0]:
            a = int(a)
            child_prefix = prefix + (a,)
            rec = instance.node(child_prefix)
            q = rec.reward
            if not rec.terminal:
                child_state = policy.advance(pstate, a, rec.observation,
                                             rec.reward)
                q += model.discount * V(child_prefix, child_state, t + 1,
                                        mass * dist[a])
            total += dist[a] * q
        return total

    root = instance.root
    if root.terminal:
        return 0.0, 1, 0.0
    value = V((), policy.reset(root.observation), 0, 1.0)
    return float(value), nodes[0], truncated[0]


def evaluate_policy_on_instances(iset: InstanceSet, policy: Policy,
                                 mode: str = "exact", n_episodes: int = 0,
                                 seed: int = 0, horizon: Optional[int] = None,
                                 node_budget: int = DEFAULT_NODE_BUDGET,
                                 prune_mass: float = 0.0) -> ValueReport:
    """V^I_pi of the empty history: episodes draw an instance uniformly."""
    model = iset.model
    horizon = model.horizon if horizon is None else min(horizon, model.horizon)
    if mode == "monte-carlo":
        if n_episodes <= 0:
            raise UsageError("n_episodes must be positive in monte-carlo mode")
        stream = rng.stream(seed, "mc-instances")
        rets = np.empty(n_episodes)
        for j in range(n_episodes):
            i = min(int(stream.random() * len(iset)), len(iset) - 1)
            rets[j] = run_instance_episode(iset[i], policy, stream,
                                           horizon).discounted_return(model.discount)
        mean = float(rets.mean())
        se = (float(rets.std(ddof=1) / math.sqrt(n_episodes))
              if n_episodes > 1 else None)
        return ValueReport(value_at_empty=mean, stderr=se, depth=horizon,
                           nodes_expanded=n_episodes, seed=seed)
    if mode != "exact":
        raise UsageError(f"unknown mode {mode!r}")
    static = policy.static_distribution()
    values, nodes, trunc = [], 0, 0.0
    for inst in iset.instances:
        if static is not None:
            v, n = _instance_value_static(model, inst, static, horizon,
                                          node_budget)
            t = 0.0
        else:
            v, n, t = _exact_instance_value(inst, policy, horizon, node_budget,
                                            prune_mass)
        values.append(v)
        nodes += n
        trunc += t
    return ValueReport(value_at_empty=float(np.mean(values)),
                       nodes_expanded=nodes, depth=horizon,
                       truncated_mass=trunc / len(iset),
                       per_node_values={i: v for i, v in enumerate(values)})


def verify_unbiased_value(model: PomdpModel, policy: Policy, set_size: int,
                          n_sets: int, seed: int = 0,
                          horizon: Optional[int] = None,
                          node_budget: int = DEFAULT_NODE_BUDGET,
                          prune_mass: float = 0.0,
                          z_max: float = 4.0) -> VerificationReport:
    """Mean of exactly-computed instance-set values vs. the exact model value.

    Passes iff the z-score of (sample mean - exact value) is within z_max.
    """
    v_model = evaluate_policy_on_model(
        model, policy, "exact", horizon=horizon, node_budget=node_budget,
        prune_mass=prune_mass).value_at_empty
    vals = np.empty(n_sets)
    for j in range(n_sets):
        iset = InstanceSet(model, rng.derive_seed(seed, "unbiased-set", j),
                           set_size)
        vals[j] = evaluate_policy_on_instances(
            iset, policy, "exact", horizon=horizon, node_budget=node_budget,
            prune_mass=prune_mass).value_at_empty
    mean = float(vals.mean())
    se = float(vals.std(ddof=1) / math.sqrt(n_sets)) if n_sets > 1 else 0.0
    scale = max(1.0, abs(v_model))
    if se <= 1e-12 * scale:
        # degenerate spread (deterministic model): exact agreement expected
        z = 0.0 if abs(mean - v_model) <= 1e-9 * scale else math.inf
        se = 0.0
    else:
        z = (mean - v_model) / se
    return VerificationReport(
        name="unbiased-value", value=float(z), tolerance=z_max,
        passed=abs(z) <= z_max, stderr=se, seed=seed,
        details={"mean_instance_value": mean, "model_value": v_model,
                 "n_sets": n_sets, "set_size": set_size})


# ---------------------------------------------------------------------------
# enumerable instance universes and the generalization bound
# ---------------------------------------------------------------------------

class ExplicitInstance:
    """Fully materialized trajectory tree over an enumerable universe.

    Duck-compatible with Instance for everything the evaluators and trainers
    use (root, node, modality, model, matches_observable).
    """

    def __init__(self, model: PomdpModel, modality: int, records: dict):
        self.model = model
        self.model_ref = model.name
        self.modality = modality
        self.records = records  # prefix tuple -> NodeRecord
        self.instance_seed = None

    @property
    def root(self) -> NodeRecord:
        return self.records[()]

    def node(self, actions) -> NodeRecord:
        prefix = tuple(actions)
        try:
            return self.records[prefix]
        except KeyError:
            raise UsageError(f"prefix {prefix} not materialized") from None

    def matches_observable(self, h) -> bool:
        if self.root.observation != h.observations[0]:
            return False
        rec = self.root
        for t in range(len(h.actions)):
            if rec.terminal:
                return False
            rec = self.node(h.actions[:t + 1])
            if (rec.observation != h.observations[t + 1]
                    or rec.reward != h.rewards[t]):
                return False
        return True


def enumerate_bandit_instance_universe(model: PomdpModel, max_size: int = 16):
    """All realizable depth-`horizon` trees of a single-state model.

    Returns a list of (ExplicitInstance, probability); errors when the
    universe exceeds max_size.
    """
    if model.num_states != 1 or model.num_modalities != 1:
        raise UsageError("universe enumeration requires a single-state, "
                         "single-modality model")
    edges = []
    for depth in range(model.horizon):
        for prefix in itertools.product(range(model.num_actions), repeat=depth):
            for a in range(model.num_actions):
                edges.append(prefix + (a,))
    options = []
    count = 1
    for edge in edges:
        row = model.transition[0, edge[-1], :, 0]
        opts = [(int(r_idx), float(p)) for r_idx, p in enumerate(row) if p > 0]
        options.append(opts)
        count *= len(opts)
        if count > max_size:
            raise UsageError(
                f"universe too large to enumerate ({count} > {max_size})")
    obs0 = int(np.argmax(model.observation[0, model.no_action, 0]))
    obs_step = [int(np.argmax(model.observation[0, a, 0]))
                for a in range(model.num_actions)]
    universe = []
    for combo in itertools.product(*options):
        prob = 1.0
        records = {(): NodeRecord(0, obs0, 0.0, False)}
        for edge, (r_idx, p) in zip(edges, combo):
            prob *= p
            records[edge] = NodeRecord(0, obs_step[edge[-1]],
                                       float(model.reward_support[r_idx]), False)
        universe.append((ExplicitInstance(model, 0, records), prob))
    return universe


class _ListSet:
    """Minimal InstanceSet stand-in over explicit instances."""

    def __init__(self, model, instances):
        self.model = model
        self.instances = list(instances)

    def __len__(self):
        return len(self.instances)

    def __getitem__(self, i):
        return self.instances[i]


class GreedyTablePolicy(Policy):
    """Deterministic policy given by a greedy-action table over histories."""

    def __init__(self, num_actions: int, table: dict):
        self.num_actions = num_actions
        self.table = table  # history code -> action

    def reset(self, o0):
        return ((int(o0),),)

    def action_probs(self, pstate):
        dist = np.zeros(self.num_actions)
        dist[self.table.get(pstate, 0)] = 1.0
        return dist

    def advance(self, pstate, action, observation, reward):
        return pstate + ((int(action), int(observation), float(reward)),)

    def state_key(self, pstate):
        return pstate


def canonical_greedy_table(model: PomdpModel, policy: Policy,
                           horizon: Optional[int] = None) -> tuple:
    """Greedy-action table of the policy over all model-possible histories.

    Ties break toward the lowest action index. The result is a sorted tuple
    of (history code, action) pairs, suitable as a hashable policy identity.
    """
    horizon = model.horizon if horizon is None else min(horizon, model.horizon)
    entries = {}

    def walk(belief, pstate, code, t):
        dist = policy.action_probs(pstate)
        entries[code] = int(np.argmax(dist))
        if t + 1 > horizon - 1:
            return
        for a in range(model.num_actions):
            _tv, branches = _belief_step(model, belief, a)
            for _p, reward, o, nxt in branches:
                walk(nxt, policy.advance(pstate, a, o, reward),
                     code + ((a, o, reward),), t + 1)

    p0 = initial_obs_dist(model)
    for o0 in np.nonzero(p0)[0]:
        walk(init_belief(model, int(o0)), policy.reset(int(o0)),
             ((int(o0),),), 0)
    return tuple(sorted(entries.items()))


def verify_generalization_bound(model: PomdpModel, set_size: int,
                                trainer: Callable, universe: Sequence,
                                tol: float = 1e-9) -> VerificationReport:
    """Value-gap bound from the mutual information between sets and policies.

    Enumerates all i.i.d. sets of `set_size` universe instances, trains
    deterministically per set, canonicalizes each policy to its greedy table,
    and checks |E_I[V^I - V]| <= sqrt(2 C^2 MI / n) with C twice the value
    bound. Both the absolute expected gap and the expected absolute gap are
    reported.
    """
    n = set_size
    sets = list(itertools.product(range(len(universe)), repeat=n))
    policy_of_set = {}
    weights = {}
    for idxs in sets:
        insts = [universe[i][0] for i in idxs]
        prob = float(np.prod([universe[i][1] for i in idxs]))
        table = canonical_greedy_table(model, trainer(insts))
        policy_of_set[idxs] = table
        weights[idxs] = prob

    # plug-in mutual information over the enumerated joint (nats)
    marginal: dict = {}
    for idxs, table in policy_of_set.items():
        marginal[table] = marginal.get(table, 0.0) + weights[idxs]
    mi = -sum(p * math.log(p) for p in marginal.values() if p > 0)

    exp_gap = 0.0
    exp_abs_gap = 0.0
    for idxs, table in policy_of_set.items():
        policy = GreedyTablePolicy(model.num_actions, dict(table))
        iset = _ListSet(model, [universe[i][0] for i in idxs])
        v_i = evaluate_policy_on_instances(iset, policy, "exact").value_at_empty
        v_m = evaluate_policy_on_model(model, policy, "exact").value_at_empty
        exp_gap += weights[idxs] * (v_i - v_m)
        exp_abs_gap += weights[idxs] * abs(v_i - v_m)

    c = 2.0 * model.value_bound()
    bound = math.sqrt(2.0 * c * c * mi / n)
    lhs = abs(exp_gap)
    return VerificationReport(
        name="generalization-bound", value=lhs, tolerance=bound + tol,
        passed=lhs <= bound + tol,
        details={"mi_nats": mi, "bound": bound, "c": c, "set_size": n,
                 "abs_expected_gap": lhs, "expected_abs_gap": exp_abs_gap,
                 "num_sets": len(sets), "num_policies": len(marginal)})


# ---------------------------------------------------------------------------
# closed forms for the single-state environment
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BanditClosedForms:
    p_hi: float
    p_lo: float
    num_actions: int
    horizon: int
    discount: float
    discounted_sum: float
    v_state_opt: float
    v_instance_lower_bound: float

    def v_policy(self, pi0: float) -> float:
        """Value of the constant policy playing arm 0 with probability pi0."""
        return (pi0 * self.p_hi + (1.0 - pi0) * self.p_lo) * self.discounted_sum


def bandit_closed_forms(p_hi: float, p_lo: float, num_actions: int,
                        horizon: int, discount: float) -> BanditClosedForms:
    if not (p_hi > p_lo):
        raise UsageError("need p_hi > p_lo")
    if num_actions < 2:
        raise UsageError("need at least 2 actions")
    dsum = abs_discounted_sum(1.0, discount, horizon)
    v_opt = p_hi * dsum
    v_lb = (1.0 - (1.0 - p_hi) * (1.0 - p_lo) ** (num_actions - 1)) * dsum
    return BanditClosedForms(p_hi, p_lo, num_actions, horizon, discount,
                             dsum, v_opt, v_lb)
