"""Deterministic trajectory trees ("instances") sampled from a POMDP.

An instance answers any action sequence with a fixed (state, observation,
reward) path. Nodes are generated lazily: the node at an action prefix is
sampled, on first touch, from the model's conditional using uniforms keyed by
(instance seed, prefix), so repeated queries are bitwise identical and the
memo is a pure cache. Whole tree levels can also be generated as arrays,
which the oracles use for large sweeps.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import rng
from .belief import ObservableHistory
from .env import PomdpModel
from .errors import NoCompatibleInstanceError, UsageError
from .reports import VerificationReport


@dataclass(frozen=True)
class NodeRecord:
    state: int
    observation: int
    reward: float
    terminal: bool


@dataclass(frozen=True)
class FullHistory:
    """H_t with hidden states included: s_0:t, o_0:t, r_1:t, a_0:t-1."""

    actions: tuple
    states: tuple
    observations: tuple
    rewards: tuple

    def __post_init__(self):
        if self.is_empty():
            return
        t = len(self.actions)
        if not (len(self.states) == len(self.observations) == t + 1
                and len(self.rewards) == t):
            raise UsageError("inconsistent history lengths")

    def is_empty(self) -> bool:
        """The condition-on-nothing history from before the initial draw."""
        return not (self.actions or self.states or self.observations
                    or self.rewards)

    @staticmethod
    def empty() -> "FullHistory":
        return FullHistory((), (), (), ())


class Instance:
    """One deterministic trajectory function realized by hierarchical seeding."""

    def __init__(self, model: PomdpModel, instance_seed: int):
        self.model = model
        self.model_ref = model.name
        self.instance_seed = int(instance_seed) & rng.MASK64
        self._root_chain = rng.chain_root(self.instance_seed)
        root_key = rng.node_key(self._root_chain, 0)
        u_state = rng.key_uniform(root_key, 0)
        u_mod = rng.key_uniform(root_key, 1)
        u_obs = rng.key_uniform(root_key, 2)
        state = rng.categorical(u_state, model.cdf_initial)
        self.modality = min(int(u_mod * model.num_modalities),
                            model.num_modalities - 1)
        obs = rng.categorical(
            u_obs, model.cdf_observation[state, model.no_action, self.modality])
        self._root = NodeRecord(state=state, observation=obs, reward=0.0,
                                terminal=bool(model.terminal_states[state]))
        # memo: action prefix -> (record, chain); pure cache over the seeding
        self._memo: dict = {(): (self._root, self._root_chain)}

    @property
    def root(self) -> NodeRecord:
        return self._root

    def clear_memo(self) -> None:
        self._memo = {(): (self._root, self._root_chain)}

    def node(self, actions: Sequence[int]) -> NodeRecord:
        """Record at the given action prefix, generating ancestors as needed."""
        prefix = tuple(actions)
        hit = self._memo.get(prefix)
        if hit is not None:
            return hit[0]
        if len(prefix) > self.model.horizon:
            raise UsageError("action sequence longer than the horizon")
        parent_rec, parent_chain = self._locate(prefix[:-1])
        return self._extend(prefix, parent_rec, parent_chain)[0]

    def _locate(self, prefix: tuple):
        hit = self._memo.get(prefix)
        if hit is not None:
            return hit
        parent = self._locate(prefix[:-1])
        return self._extend(prefix, parent[0], parent[1])

    def _extend(self, prefix: tuple, parent: NodeRecord, parent_chain: int):
        action = prefix[-1]
        if not (0 <= action < self.model.num_actions):
            raise UsageError(f"action {action} out of range")
        if parent.terminal:
            raise UsageError("cannot extend past a terminal node")
        chain = rng.chain_absorb(parent_chain, action)
        key = rng.node_key(chain, len(prefix))
        m = self.model
        flat = rng.categorical(rng.key_uniform(key, 0),
                               m.cdf_transition[parent.state, action])
        r_idx, s2 = divmod(flat, m.num_states)
        obs = rng.categorical(rng.key_uniform(key, 1),
                              m.cdf_observation[s2, action, self.modality])
        rec = NodeRecord(state=int(s2), observation=int(obs),
                         reward=float(m.reward_support[r_idx]),
                         terminal=bool(m.terminal_states[s2]))
        self._memo[prefix] = (rec, chain)
        return rec, chain

    def query(self, actions: Sequence[int]) -> list:
        """Full visited path [root, node(a_0), ..., node(a_0:t-1)]."""
        actions = tuple(actions)
        if len(actions) > self.model.horizon:
            raise UsageError("action sequence longer than the horizon")
        path = [self._root]
        for t in range(1, len(actions) + 1):
            path.append(self.node(actions[:t]))
        return path

    def matches_observable(self, h: ObservableHistory) -> bool:
        """Does this tree emit exactly the (o, r) sequence of h along its actions?"""
        if self._root.observation != h.observations[0]:
            return False
        rec = self._root
        for t, a in enumerate(h.actions):
            if rec.terminal:
                return False
            rec = self.node(h.actions[:t + 1])
            if rec.observation != h.observations[t + 1] or rec.reward != h.rewards[t]:
                return False
        return True

    def matches_full(self, h: FullHistory) -> bool:
        """Full-history compatibility: states checked in addition to (o, r)."""
        if h.is_empty():
            return True
        if (self._root.state != h.states[0]
                or self._root.observation != h.observations[0]):
            return False
        rec = self._root
        for t, a in enumerate(h.actions):
            if rec.terminal:
                return False
            rec = self.node(h.actions[:t + 1])
            if (rec.state != h.states[t + 1]
                    or rec.observation != h.observations[t + 1]
                    or rec.reward != h.rewards[t]):
                return False
        return True

    def to_tree_dict(self, max_depth: int) -> dict:
        """Depth-limited tree as plain dicts (for the dump-tree CLI mode)."""
        def expand(prefix):
            rec = self.node(prefix)
            d = {"state": rec.state, "observation": rec.observation,
                 "reward": rec.reward, "terminal": rec.terminal}
            if len(prefix) < max_depth and not rec.terminal:
                d["children"] = {
                    str(a): expand(prefix + (a,))
                    for a in range(self.model.num_actions)
                }
            return d

        return {"instance_seed": self.instance_seed, "modality": self.modality,
                "model": self.model_ref, "tree": expand(())}


def spawn_instance(model: PomdpModel, instance_seed: int) -> Instance:
    return Instance(model, instance_seed)


def instance_seeds(set_seed: int, size: int) -> list:
    seeds = [rng.derive_seed(set_seed, "instance", i) for i in range(size)]
    if len(set(seeds)) != size:
        raise UsageError("instance seed collision; choose another set_seed")
    return seeds


class InstanceSet:
    """Ordered finite set of instances with seeds derived from one set seed."""

    def __init__(self, model: PomdpModel, set_seed: int, size: int):
        self.model = model
        self.set_seed = int(set_seed)
        self.instances = [Instance(model, s)
                          for s in instance_seeds(self.set_seed, size)]

    def __len__(self):
        return len(self.instances)

    def __getitem__(self, i) -> Instance:
        return self.instances[i]


def instance_set_transition(iset: InstanceSet, history: FullHistory,
                            action: int) -> np.ndarray:
    """Exact mixture over compatible instances of the next (reward, state).

    Returns the (R, S) joint probability table. The posterior over instances
    is uniform over the compatible subset because instances are sampled
    uniformly and emissions are deterministic.
    """
    model = iset.model
    compatible = [inst for inst in iset.instances if inst.matches_full(history)]
    if not compatible:
        raise NoCompatibleInstanceError("history matches no instance in the set")
    out = np.zeros((len(model.reward_support), model.num_states))
    w = 1.0 / len(compatible)
    for inst in compatible:
        node = inst.node(history.actions)
        if node.terminal:
            raise UsageError("history ends at a terminal node")
        nxt = inst.node(history.actions + (action,))
        out[model.reward_index(nxt.reward), nxt.state] += w
    return out


def instance_posterior(iset: InstanceSet, obs_history: ObservableHistory) -> np.ndarray:
    """Posterior over instances given an observable history.

    Weight is proportional to exact emission compatibility; all-zero
    compatibility yields the explicit empty posterior (a zero vector).
    """
    mask = np.array([inst.matches_observable(obs_history)
                     for inst in iset.instances], dtype=float)
    total = mask.sum()
    return mask / total if total > 0 else mask


# ---------------------------------------------------------------------------
# vectorized tree levels (shared by the statistical verifiers and oracles)
# ---------------------------------------------------------------------------

def roots_vectorized(model: PomdpModel, seeds: np.ndarray):
    """Root draws for many instances at once.

    Returns (chains, states, modalities, observations) arrays; bitwise
    consistent with Instance construction.
    """
    seeds = np.asarray(seeds, dtype=np.uint64)
    chains = rng.mix64_array(seeds ^ np.uint64(rng.GOLDEN))
    keys = rng.node_key_array(chains, 0)
    states = rng.categorical_rows(rng.key_uniform_array(keys, 0),
                                  np.broadcast_to(model.cdf_initial,
                                                  (len(seeds), model.num_states)))
    K = model.num_modalities
    mods = np.minimum((rng.key_uniform_array(keys, 1) * K).astype(np.int64), K - 1)
    cdf_o = model.cdf_observation[states, model.no_action, mods]
    obs = rng.categorical_rows(rng.key_uniform_array(keys, 2), cdf_o)
    return chains, states.astype(np.int64), mods, obs.astype(np.int64)


def children_vectorized(model: PomdpModel, chains: np.ndarray, states: np.ndarray,
                        modalities, action, depth: int, with_obs: bool = True):
    """One-step extension of many nodes by `action` (scalar or per-node array).

    Returns (child_chains, rewards, next_states, observations|None, terminal).
    """
    child_chains = rng.chain_absorb_array(chains, action)
    keys = rng.node_key_array(child_chains, depth)
    a = np.broadcast_to(np.asarray(action, dtype=np.int64), states.shape)
    flat = rng.categorical_rows(rng.key_uniform_array(keys, 0),
                                model.cdf_transition[states, a])
    r_idx, s2 = np.divmod(flat, model.num_states)
    obs = None
    if with_obs:
        mods = np.broadcast_to(np.asarray(modalities, dtype=np.int64), states.shape)
        obs = rng.categorical_rows(rng.key_uniform_array(keys, 1),
                                   model.cdf_observation[s2, a, mods]).astype(np.int64)
    rewards = model.reward_support[r_idx]
    return (child_chains, rewards, s2.astype(np.int64), obs,
            model.terminal_states[s2])


def children_all_actions(model: PomdpModel, chains: np.ndarray,
                         states: np.ndarray, modality, depth: int,
                         with_obs: bool = False):
    """All-action extension of a node level in one vectorized pass.

    Returns (chains, rewards, states, obs|None, terminal), each shaped (n, A).
    """
    n = len(chains)
    A = model.num_actions
    acts = np.tile(np.arange(A, dtype=np.int64), n)
    c, r, s2, obs, term = children_vectorized(
        model, np.repeat(chains, A), np.repeat(states, A),
        modality, acts, depth, with_obs=with_obs)
    shape = (n, A)
    return (c.reshape(shape), r.reshape(shape), s2.reshape(shape),
            obs.reshape(shape) if obs is not None else None,
            term.reshape(shape))


# ---------------------------------------------------------------------------
# statistical check: mean instance law vs. the model law
# ---------------------------------------------------------------------------

def exact_nstep_law(model: PomdpModel, template: Optional[FullHistory],
                    actions: Sequence[int]) -> dict:
    """Exact joint law of (r, s, o)_{1:h} under the fixed action sequence.

    Computed by sparse forward contraction of T and Obs, starting from the
    template's conditional over (state, modality); terminal states continue
    absorbingly so the law is defined for the full window.
    """
    K = model.num_modalities
    if template is None or len(template.states) == 0:
        start = {}
        for s, p in enumerate(model.initial_dist):
            for k in range(K):
                if p > 0:
                    start[(s, k)] = start.get((s, k), 0.0) + p / K
    else:
        # condition the modality on the template's emissions; states are given
        k_post = np.ones(K)
        k_post *= model.observation[template.states[0], model.no_action, :,
                                    template.observations[0]]
        for t, a in enumerate(template.actions):
            k_post *= model.observation[template.states[t + 1], a, :,
                                        template.observations[t + 1]]
        if k_post.sum() == 0:
            raise UsageError("template impossible under the model")
        k_post /= k_post.sum()
        s_t = template.states[-1]
        start = {(s_t, k): p for k, p in enumerate(k_post) if p > 0}

    law = {(): start}
    for a in actions:
        nxt = {}
        for tup, ends in law.items():
            for (s, k), p in ends.items():
                row = model.transition[s, a]
                for r_idx, s2 in zip(*np.nonzero(row)):
                    pr = p * row[r_idx, s2]
                    orow = model.observation[s2, a, k]
                    for o in np.nonzero(orow)[0]:
                        key = tup + ((int(r_idx), int(s2), int(o)),)
                        cell = nxt.setdefault(key, {})
                        st = (int(s2), int(k))
                        cell[st] = cell.get(st, 0.0) + pr * orow[o]
        law = nxt
    return {tup: sum(ends.values()) for tup, ends in law.items()}


def verify_expected_transition(model: PomdpModel, template: Optional[FullHistory],
                               actions: Sequence[int], n_instances: int,
                               horizon_n: Optional[int] = None,
                               seed: int = 0) -> VerificationReport:
    """Mean of fresh-instance n-step laws vs. the exact model law (L1).

    Passes iff the L1 distance is at most 3 * sqrt(support / n) where
    `support` is the size of the exact law's support.
    """
    actions = tuple(actions)
    if horizon_n is not None:
        actions = actions[:horizon_n]
    if len(actions) < 1:
        raise UsageError("need at least one action")

    exact = exact_nstep_law(model, template, actions)
    seeds = np.array([rng.derive_seed(seed, "verify-instance", i)
                      for i in range(n_instances)], dtype=np.uint64)
    chains, states, mods, obs0 = roots_vectorized(model, seeds)

    if template is not None and len(template.states) > 0:
        keep = states == template.states[0]
        keep &= obs0 == template.observations[0]
        work = chains[keep], states[keep], mods[keep]
        chains, states, mods = work
        for t, a in enumerate(template.actions):
            chains, rewards, states, obs, _ = children_vectorized(
                model, chains, states, mods, a, t + 1)
            keep = (states == template.states[t + 1])
            keep &= obs == template.observations[t + 1]
            keep &= rewards == template.rewards[t]
            chains, states, mods = chains[keep], states[keep], mods[keep]
        base_depth = len(template.actions)
    else:
        base_depth = 0
    n_eff = len(states)
    if n_eff == 0:
        raise NoCompatibleInstanceError("no sampled instance matches the template")

    paths = [tuple() for _ in range(n_eff)]
    for j, a in enumerate(actions):
        chains, rewards, states, obs, _ = children_vectorized(
            model, chains, states, mods, a, base_depth + j + 1)
        r_idx = np.searchsorted(model.reward_support, rewards)
        paths = [p + ((int(r), int(s), int(o)),)
                 for p, r, s, o in zip(paths, r_idx, states, obs)]

    counts: dict = {}
    for p in paths:
        counts[p] = counts.get(p, 0) + 1
    support = set(exact) | set(counts)
    l1 = float(sum(abs(exact.get(k, 0.0) - counts.get(k, 0) / n_eff)
                   for k in support))
    tol = 3.0 * float(np.sqrt(len(exact) / n_eff))
    return VerificationReport(
        name="expected-transition", value=l1, tolerance=tol, passed=l1 <= tol,
        seed=seed, nodes_expanded=n_eff * len(actions),
        details={"n_instances": n_eff, "steps": len(actions),
                 "support": len(exact)},
    )
