"""Evaluation quantities for comparing trained policies.

Per-instance policy signatures (time-averaged action distributions), KL
divergence against a reference signature, paired time-to-reward differences
on jointly successful episodes, and the weight-space geometry of the ensemble
heads.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import rng
from .errors import UsageError
from .learner import HeadParams, policy_probs
from .policies import Policy, run_instance_episode

SIGNATURE_ATOL = 1e-10


@dataclass(frozen=True)
class PolicySignature:
    """Time-averaged action distribution of one evaluation episode."""

    instance_id: int
    distribution: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.distribution, dtype=np.float64)
        object.__setattr__(self, "distribution", d)
        if abs(d.sum() - 1.0) > SIGNATURE_ATOL or np.any(d < 0):
            raise UsageError("signature is not a distribution")


@dataclass(frozen=True)
class EpisodeStat:
    instance_id: int
    return_value: float
    success: bool
    steps_to_reward: Optional[int]


def time_averaged_policy(policy: Policy, instance, seed: int = 0,
                         episodes: int = 1,
                         instance_id: int = -1) -> PolicySignature:
    """Mean of the per-step action distributions over evaluation episodes.

    Evaluation sampling is stochastic with a fixed stream, so signatures are
    reproducible bitwise for equal seeds.
    """
    stream = rng.stream(seed, "signature", max(instance_id, 0))
    dists = []
    for _ in range(episodes):
        trace = run_instance_episode(instance, policy, stream)
        dists.extend(trace.dists)
    if not dists:
        raise UsageError("episode produced no steps; no signature defined")
    return PolicySignature(instance_id, np.mean(dists, axis=0))


def kl_divergence(p: np.ndarray, q: np.ndarray) -> float:
    """sum p ln(p/q) with 0 ln 0 = 0; infinite when q is 0 where p > 0."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise UsageError("distributions have different lengths")
    total = 0.0
    for pi, qi in zip(p, q):
        if pi == 0.0:
            continue
        if qi == 0.0:
            return math.inf
        total += pi * math.log(pi / qi)
    return max(total, 0.0)


def episode_stat(instance, policy: Policy, stream, r_max: float,
                 instance_id: int = -1, gamma: float = 1.0) -> EpisodeStat:
    trace = run_instance_episode(instance, policy, stream)
    success = len(trace.rewards) > 0 and trace.rewards[-1] == r_max
    return EpisodeStat(
        instance_id=instance_id,
        return_value=trace.discounted_return(gamma),
        success=success,
        steps_to_reward=trace.steps if success else None)


def delta_time_to_reward(policy: Policy, base_policy: Policy,
                         pool: Sequence, r_max: float, seed: int = 0,
                         episodes: int = 1) -> dict:
    """Per-instance step-count difference vs. the base policy when both succeed.

    Positive values mean the policy takes longer to reach the terminal reward
    (more cautious than the base). Episodes are paired through per-instance
    seeds. Returns mean/sd plus the full empirical distribution; an empty
    statistic is flagged when no instance succeeds under both policies.
    """
    deltas = []
    for i, inst in enumerate(pool):
        for e in range(episodes):
            # paired evaluation: both policies consume an identically seeded
            # stream on the same instance
            a = episode_stat(inst, policy,
                             rng.stream(seed, "dt", i * episodes + e),
                             r_max, i)
            b = episode_stat(inst, base_policy,
                             rng.stream(seed, "dt", i * episodes + e),
                             r_max, i)
            if a.success and b.success:
                deltas.append(a.steps_to_reward - b.steps_to_reward)
    if not deltas:
        return {"count": 0, "mean": None, "sd": None, "deltas": [], "empty": True}
    arr = np.array(deltas, dtype=np.float64)
    sd = float(arr.std(ddof=1)) if len(arr) > 1 else 0.0
    return {"count": len(arr), "mean": float(arr.mean()), "sd": sd,
            "deltas": [int(d) for d in deltas], "empty": False}


def _flatten_head(w: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.concatenate([w.ravel(), np.atleast_1d(b).ravel()])


def cosine_similarity_heads(heads: HeadParams) -> dict:
    """Pairwise cosine similarity matrices of the policy and value heads.

    Heads are flattened (weights plus bias); zero-norm heads yield NaN
    entries, flagged in the result.
    """
    if heads.num_subsets < 2:
        raise UsageError("need at least two heads to compare")

    def matrix(vecs):
        M = len(vecs)
        out = np.eye(M)
        flagged = False
        for i in range(M):
            for j in range(i + 1, M):
                ni, nj = np.linalg.norm(vecs[i]), np.linalg.norm(vecs[j])
                if ni == 0.0 or nj == 0.0:
                    out[i, j] = out[j, i] = math.nan
                    flagged = True
                else:
                    out[i, j] = out[j, i] = float(vecs[i] @ vecs[j] / (ni * nj))
        return out, flagged

    pol, pol_flag = matrix([_flatten_head(heads.policy_w[m], heads.policy_b[m])
                            for m in range(heads.num_subsets)])
    val, val_flag = matrix([_flatten_head(heads.value_w[m], heads.value_b[m])
                            for m in range(heads.num_subsets)])
    return {"policy": pol, "value": val,
            "zero_norm_flagged": pol_flag or val_flag}


def median_offdiagonal(matrix: np.ndarray) -> float:
    M = matrix.shape[0]
    vals = [matrix[i, j] for i in range(M) for j in range(M) if i != j]
    return float(np.median(vals))


def ensemble_agreement(theta, heads: HeadParams, pool: Sequence,
                       seed: int = 0, episodes: int = 1) -> float:
    """Mean KL between the consensus signature and each subset signature.

    Signatures are time-averaged over shared evaluation episodes collected
    with the consensus policy; infinite KL (support mismatch) propagates.
    """
    from .iape import ConsensusPolicy, consensus_probs  # local: avoid cycle

    if heads.num_subsets < 2:
        raise UsageError("agreement needs at least two heads")
    policy = ConsensusPolicy(theta, heads)
    total, count = 0.0, 0
    for i, inst in enumerate(pool):
        stream = rng.stream(seed, "agreement", i)
        for _ in range(episodes):
            node = inst.root
            h = policy.reset(node.observation)
            per_head = [[] for _ in range(heads.num_subsets)]
            cons = []
            prefix = ()
            while not node.terminal and len(prefix) < inst.model.horizon:
                dist = consensus_probs(heads, h)
                cons.append(dist)
                for m in range(heads.num_subsets):
                    per_head[m].append(policy_probs(heads, m, h))
                a = rng.categorical(stream.random(), np.cumsum(dist))
                prefix = prefix + (a,)
                node = inst.node(prefix)
                if node.terminal:
                    break
                h = policy.advance(h, a, node.observation, node.reward)
            if not cons:
                continue
            cons_sig = np.mean(cons, axis=0)
            for m in range(heads.num_subsets):
                total += kl_divergence(cons_sig, np.mean(per_head[m], axis=0))
                count += 1
    if count == 0:
        raise UsageError("no evaluation steps; agreement undefined")
    return total / count
