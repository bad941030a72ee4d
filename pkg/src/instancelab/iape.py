"""Ensemble policy training over instance subsets with consensus collection.

The training scheme splits the instance pool into M subsets. A shared
recurrent encoder feeds one policy head and one value head per subset; the
consensus policy (the arithmetic mean of the subset policies) collects the
training trajectories and is the policy deployed on unseen levels. Value
targets are n-step bootstrapped returns with the cumulative importance-weight
product clipped to [w_lo, w_hi]; per-step clipping is deliberately avoided.

Algorithm variants, all driven by the same loop:
    base  M=1, no weight penalty
    l2    M=1, weight penalty on all parameters
    eb    M>1, each subset collects with its own policy
    iape  M>1, consensus collection
    inf   M=1, a fresh instance every episode
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Callable, Optional

import numpy as np

from . import learner, oracle, rng
from .env import PomdpModel
from .errors import NonFiniteError, UsageError
from .instance import Instance, instance_seeds
from .learner import (AdamState, EncoderParams, HeadParams, adam_update,
                      encode_step, params_as_dict, policy_probs, softmax)
from .policies import Policy, run_instance_episode

ALGOS = ("base", "l2", "eb", "iape", "inf")


@dataclass
class TrainConfig:
    algo: str = "iape"
    num_subsets: int = 4
    instances_per_subset: int = 8
    rollout_n: int = 16
    w_lo: float = 0.5
    w_hi: float = 2.0
    gamma: Optional[float] = None          # None: use the model discount
    learning_rate: float = 3e-3
    lambda_reg: float = 0.0                # l2 over encoder and all heads
    lambda_theta: float = 0.0              # additional l2 over the encoder only
    minibatch_episodes: int = 8
    total_env_steps: int = 200_000
    eval_every: int = 20_000
    eval_episodes: int = 200
    width: int = 32
    seed: int = 0
    instance_set_seed: int = 1000
    continual_steps: int = 60_000
    continual_set_seed: int = 2000

    def validate(self) -> None:
        if self.algo not in ALGOS:
            raise UsageError(f"unknown algo {self.algo!r}; expected one of {ALGOS}")
        if not (self.w_lo <= 1.0 <= self.w_hi):
            raise UsageError("need w_lo <= 1 <= w_hi")
        if self.algo in ("base", "l2", "inf") and self.num_subsets != 1:
            raise UsageError(f"algo {self.algo!r} requires num_subsets = 1")
        if self.algo == "base" and (self.lambda_reg != 0.0
                                    or self.lambda_theta != 0.0):
            raise UsageError("algo 'base' runs without weight penalties")
        if self.algo in ("eb", "iape") and self.num_subsets < 2:
            raise UsageError(f"algo {self.algo!r} requires num_subsets >= 2")
        if self.lambda_reg < 0.0 or self.lambda_theta < 0.0:
            raise UsageError("weight penalties must be non-negative")
        if min(self.rollout_n, self.minibatch_episodes, self.width,
               self.instances_per_subset, self.total_env_steps) < 1:
            raise UsageError("size parameters must be positive")

    def effective_gamma(self, model: PomdpModel) -> float:
        return model.discount if self.gamma is None else self.gamma


@dataclass
class EpisodeRecord:
    subset: int
    instance_id: int
    observations: np.ndarray     # o_0..o_T
    actions: np.ndarray          # a_0..a_{T-1}
    rewards: np.ndarray          # r_1..r_T
    behavior_probs: np.ndarray   # behavior probability of each taken action
    own_probs: np.ndarray        # same, under the episode subset's own head
    terminal: bool               # True: zero tail; False: cut, bootstrap tail
    final_hidden: np.ndarray     # collection-time hidden after the last step

    @property
    def steps(self) -> int:
        return len(self.actions)


@dataclass
class RolloutBatch:
    episodes: list

    @property
    def total_steps(self) -> int:
        return sum(ep.steps for ep in self.episodes)


@dataclass
class LossReport:
    l_v: float
    l_pi: float
    reg: float
    total: float
    grad_norm: float


# ---------------------------------------------------------------------------
# policies backed by the learned parameters
# ---------------------------------------------------------------------------

def head_distributions(heads: HeadParams, hidden: np.ndarray) -> np.ndarray:
    """All subset policy distributions at one hidden state, shape (M, A)."""
    logits = heads.policy_w @ hidden + heads.policy_b
    return softmax(logits)


def consensus_probs(heads: HeadParams, hidden: np.ndarray) -> np.ndarray:
    """Arithmetic mean of the subset policy distributions."""
    return head_distributions(heads, hidden).mean(axis=0)


class _NetPolicy(Policy):
    def __init__(self, theta: EncoderParams, heads: HeadParams):
        self.theta = theta
        self.heads = heads
        self._none_action = theta.w_action.shape[1] - 1

    def reset(self, o0: int):
        zero = np.zeros(self.theta.width)
        return encode_step(self.theta, int(o0), 0.0, self._none_action, zero)

    def advance(self, hidden, action, observation, reward):
        return encode_step(self.theta, int(observation), float(reward),
                           int(action), hidden)


class ConsensusPolicy(_NetPolicy):
    def action_probs(self, hidden):
        return consensus_probs(self.heads, hidden)


class SubsetPolicy(_NetPolicy):
    def __init__(self, theta, heads, m: int):
        super().__init__(theta, heads)
        self.m = m

    def action_probs(self, hidden):
        return policy_probs(self.heads, self.m, hidden)


# ---------------------------------------------------------------------------
# collection
# ---------------------------------------------------------------------------

def collect_rollout(pools: list, behavior: str, theta: EncoderParams,
                    heads: HeadParams, stream: np.random.Generator,
                    horizon: int, n_episodes: Optional[int] = None,
                    length: Optional[int] = None,
                    fresh_spawner: Optional[Callable] = None) -> RolloutBatch:
    """Collect episodes under the consensus or subset-specific behavior policy.

    pools[m] is subset m's instance list; `fresh_spawner(j)` replaces the
    pools when every episode runs on a brand-new instance. Stops after
    n_episodes episodes or once `length` environment steps are recorded
    (cutting the final episode, which then carries a bootstrap tail).
    """
    if behavior not in ("consensus", "subset"):
        raise UsageError(f"unknown behavior {behavior!r}")
    if (n_episodes is None) == (length is None):
        raise UsageError("specify exactly one of n_episodes / length")
    M = len(pools) if fresh_spawner is None else 1
    none_action = theta.w_action.shape[1] - 1
    episodes = []
    steps = 0
    ep_index = 0
    while True:
        if n_episodes is not None and ep_index >= n_episodes:
            break
        if length is not None and steps >= length:
            break
        m = min(int(stream.random() * M), M - 1)
        if fresh_spawner is not None:
            inst = fresh_spawner(ep_index)
            instance_id = -1
        else:
            pool = pools[m]
            instance_id = min(int(stream.random() * len(pool)), len(pool) - 1)
            inst = pool[instance_id]
        budget = None if length is None else length - steps
        ep = _run_collect_episode(inst, m, instance_id, behavior, theta, heads,
                                  stream, horizon, none_action, budget)
        episodes.append(ep)
        steps += ep.steps
        ep_index += 1
    return RolloutBatch(episodes)


def _run_collect_episode(inst: Instance, m: int, instance_id: int,
                         behavior: str, theta, heads, stream, horizon: int,
                         none_action: int, budget: Optional[int]):
    node = inst.root
    h = encode_step(theta, node.observation, 0.0, none_action,
                    np.zeros(theta.width))
    obs = [node.observation]
    acts, rews, bprobs, oprobs = [], [], [], []
    prefix = ()
    terminal = node.terminal
    cut = False
    while not terminal and len(acts) < horizon:
        if budget is not None and len(acts) >= budget:
            cut = True
            break
        dists = head_distributions(heads, h)
        dist = dists.mean(axis=0) if behavior == "consensus" else dists[m]
        u = stream.random()
        a = 0
        acc = dist[0]
        last_action = len(dist) - 1
        while u >= acc and a < last_action:
            a += 1
            acc += dist[a]
        prefix = prefix + (a,)
        node = inst.node(prefix)
        obs.append(node.observation)
        acts.append(a)
        rews.append(node.reward)
        bprobs.append(float(dist[a]))
        oprobs.append(float(dists[m, a]))
        terminal = node.terminal
        h = encode_step(theta, node.observation, node.reward, a, h)
    return EpisodeRecord(
        subset=m, instance_id=instance_id,
        observations=np.array(obs, dtype=np.int64),
        actions=np.array(acts, dtype=np.int64),
        rewards=np.array(rews, dtype=np.float64),
        behavior_probs=np.array(bprobs, dtype=np.float64),
        own_probs=np.array(oprobs, dtype=np.float64),
        terminal=not cut, final_hidden=h)


# ---------------------------------------------------------------------------
# targets and losses
# ---------------------------------------------------------------------------

def _batch_arrays(theta: EncoderParams, batch: RolloutBatch):
    """Pad episodes into (B, T+1) input arrays plus masks."""
    B = len(batch.episodes)
    tmax = max(ep.steps for ep in batch.episodes)
    none_action = theta.w_action.shape[1] - 1
    obs = np.zeros((B, tmax + 1), dtype=np.int64)
    rewards_in = np.zeros((B, tmax + 1))
    prev_actions = np.full((B, tmax + 1), none_action, dtype=np.int64)
    mask = np.zeros((B, tmax + 1))
    for b, ep in enumerate(batch.episodes):
        T = ep.steps
        obs[b, :T + 1] = ep.observations
        rewards_in[b, 1:T + 1] = ep.rewards
        prev_actions[b, 1:T + 1] = ep.actions
        mask[b, :T + 1] = 1.0
    return {"observations": obs, "rewards_in": rewards_in,
            "prev_actions": prev_actions, "mask": mask}


def _forward_batch(theta, heads, batch: RolloutBatch):
    """Padded batched forward: hiddens, own-head probabilities, and values.

    Importance ratios never come from here (they are frozen collection-time
    records), so this path is free to use batched arithmetic.
    """
    inputs = _batch_arrays(theta, batch)
    hiddens = learner.forward_hidden_batch(
        theta, inputs["observations"], inputs["rewards_in"],
        inputs["prev_actions"], inputs["mask"])
    subset_ids = np.array([ep.subset for ep in batch.episodes], dtype=np.int64)
    logits = np.einsum("bad,btd->bta", heads.policy_w[subset_ids], hiddens)
    logits += heads.policy_b[subset_ids][:, None, :]
    probs = softmax(logits)
    values = np.einsum("bd,btd->bt", heads.value_w[subset_ids], hiddens)
    values += heads.value_b[subset_ids][:, None]
    return inputs, hiddens, subset_ids, probs, values


def _episode_targets(ep: EpisodeRecord, values: np.ndarray, n: int,
                     w_lo: float, w_hi: float, gamma: float):
    """Clipped importance-weighted n-step targets for one episode.

    values: subset-head value estimates (T+1,). The importance ratios divide
    the recorded own-head probabilities by the recorded behavior
    probabilities, so identical policies give ratios of exactly one.
    Returns (g, adv, rho) of length T; adv uses the one-step-ahead target
    and the current value estimate as its baseline.
    """
    T = ep.steps
    rho = ep.own_probs / ep.behavior_probs
    rho_l = rho.tolist()
    rewards = ep.rewards.tolist()
    vals = values.tolist()
    # g_ext[T] closes the recursion: zero tail at terminal ends, pure
    # bootstrap at a collection cut
    g = [0.0] * (T + 1)
    g[T] = 0.0 if ep.terminal else vals[T]
    for tau in range(T - 1, -1, -1):
        hi = min(tau + n, T)
        prod = 1.0
        disc = 1.0
        val = 0.0
        w = 1.0
        for t in range(tau, hi):
            prod *= rho_l[t]
            w = min(max(prod, w_lo), w_hi)
            val += disc * w * rewards[t]
            disc *= gamma
        if hi < T:
            prod *= rho_l[hi]
            val += disc * min(max(prod, w_lo), w_hi) * vals[hi]
        elif not ep.terminal:
            val += disc * w * vals[T]
        g[tau] = val
    g = np.array(g)
    adv = ep.rewards + gamma * g[1:] - values[:T]
    return g[:T], adv, rho


@dataclass
class FrozenTargets:
    """Per-episode constants of the surrogate loss (stop-gradient terms)."""

    g: list
    adv: list
    rho: list
    weights: np.ndarray        # per-episode sample weight (subset-balanced)


def compute_targets(theta, heads, batch: RolloutBatch,
                    config: TrainConfig, gamma: float,
                    values_batch: Optional[np.ndarray] = None) -> FrozenTargets:
    if values_batch is None:
        _i, _h, _s, _p, values_batch = _forward_batch(theta, heads, batch)
    g_all, adv_all, rho_all = [], [], []
    for b, ep in enumerate(batch.episodes):
        g, adv, rho = _episode_targets(
            ep, values_batch[b], config.rollout_n, config.w_lo,
            config.w_hi, gamma)
        if not (np.all(np.isfinite(g)) and np.all(np.isfinite(adv))):
            bad = int(np.argmax(~np.isfinite(g + adv)))
            raise NonFiniteError(f"non-finite target at episode {b}, step {bad}")
        g_all.append(g)
        adv_all.append(adv)
        rho_all.append(rho)
    subset_ids = [ep.subset for ep in batch.episodes]
    present = sorted(set(subset_ids))
    counts = {m: sum(ep.steps for ep in batch.episodes if ep.subset == m)
              for m in present}
    weights = np.array([1.0 / (len(present) * counts[m]) for m in subset_ids])
    return FrozenTargets(g_all, adv_all, rho_all, weights)


def clipped_iw_return(batch: RolloutBatch, episode_index: int, tau: int,
                      n: int, w_lo: float, w_hi: float, theta: EncoderParams,
                      heads: HeadParams, gamma: float) -> float:
    """Value target g for one (episode, position): the op-level entry point."""
    ep = batch.episodes[episode_index]
    if not (0 <= tau < ep.steps):
        raise UsageError("position outside the episode")
    _i, _h, _s, _p, values = _forward_batch(theta, heads,
                                            RolloutBatch([ep]))
    g, _adv, _rho = _episode_targets(ep, values[0], n, w_lo, w_hi, gamma)
    return float(g[tau])


def surrogate_loss(theta, heads, batch: RolloutBatch, config: TrainConfig,
                   gamma: float, frozen: FrozenTargets) -> float:
    """Differentiable surrogate: targets, advantages and ratios held fixed."""
    _i, _h, _s, probs_all, values_all = _forward_batch(theta, heads, batch)
    total = 0.0
    for b, ep in enumerate(batch.episodes):
        T = ep.steps
        probs, values = probs_all[b], values_all[b]
        logp = np.log(probs[np.arange(T), ep.actions])
        l_v = (values[:T] - frozen.g[b]) ** 2
        l_pi = -logp * frozen.rho[b] * frozen.adv[b]
        total += frozen.weights[b] * float(np.sum(0.5 * l_v + l_pi))
    params = params_as_dict(theta, heads)
    reg = config.lambda_reg * sum(float((p * p).sum()) for p in params.values())
    reg += config.lambda_theta * sum(
        float((params[k] * params[k]).sum())
        for k in ("w_obs", "w_reward", "w_action", "w_hidden", "bias"))
    return total + reg


def compute_losses(theta, heads, batch: RolloutBatch, config: TrainConfig,
                   gamma: float, frozen: Optional[FrozenTargets] = None):
    """Loss report plus exact gradients of the surrogate loss.

    Gradients flow only through the value estimate in the critic term and the
    log-probability in the actor term; targets, advantages, importance
    ratios, and the advantage baseline are constants. Subset heads receive
    gradients exclusively from their own subset's episodes.
    """
    inputs, hiddens, subset_ids, probs_all, values_all = _forward_batch(
        theta, heads, batch)
    if frozen is None:
        frozen = compute_targets(theta, heads, batch, config, gamma,
                                 values_batch=values_all)
    B, T1, A = probs_all.shape
    dl_dlogits = np.zeros((B, T1, A))
    dl_dvalue = np.zeros((B, T1))
    l_v_sum, l_pi_sum = 0.0, 0.0
    for b, ep in enumerate(batch.episodes):
        T = ep.steps
        probs, values = probs_all[b], values_all[b]
        w = frozen.weights[b]
        verr = values[:T] - frozen.g[b]
        l_v_sum += w * float(np.sum(verr ** 2))
        dl_dvalue[b, :T] = w * verr
        coef = frozen.rho[b] * frozen.adv[b]          # (T,)
        logp = np.log(probs[np.arange(T), ep.actions])
        l_pi_sum += w * float(np.sum(-logp * coef))
        grad_log = w * coef[:, None] * probs[:T]      # (T, A)
        grad_log[np.arange(T), ep.actions] -= w * coef
        dl_dlogits[b, :T] = grad_log
    grads = learner.backward(theta, heads, inputs, hiddens, dl_dlogits,
                             dl_dvalue, subset_ids)
    params = params_as_dict(theta, heads)
    reg = 0.0
    for k, p in params.items():
        lam = config.lambda_reg
        if k in ("w_obs", "w_reward", "w_action", "w_hidden", "bias"):
            lam = config.lambda_reg + config.lambda_theta
        if lam > 0.0:
            reg += lam * float((p * p).sum())
            grads[k] += 2.0 * lam * p
    total = 0.5 * l_v_sum + l_pi_sum + reg
    if not math.isfinite(total):
        raise NonFiniteError("non-finite total loss")
    gnorm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    report = LossReport(l_v=l_v_sum, l_pi=l_pi_sum, reg=reg, total=total,
                        grad_norm=gnorm)
    return report, grads


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    theta: EncoderParams
    heads: HeadParams
    adam: AdamState
    meta: dict
    log_rows: list
    pools: list


def build_pools(model: PomdpModel, config: TrainConfig,
                set_seed: Optional[int] = None) -> list:
    """M contiguous subsets carved from one derived seed sequence."""
    set_seed = config.instance_set_seed if set_seed is None else set_seed
    total = config.num_subsets * config.instances_per_subset
    seeds = instance_seeds(set_seed, total)
    pools = []
    for m in range(config.num_subsets):
        lo = m * config.instances_per_subset
        pools.append([Instance(model, s)
                      for s in seeds[lo:lo + config.instances_per_subset]])
    return pools


def _behavior_of(algo: str) -> str:
    return "subset" if algo == "eb" else "consensus"


def _evaluate(model, theta, heads, pools, config, round_idx: int,
              fresh: bool) -> tuple:
    policy = ConsensusPolicy(theta, heads)
    test = oracle.evaluate_policy_on_model(
        model, policy, "monte-carlo", n_episodes=config.eval_episodes,
        seed=rng.derive_seed(config.seed, "eval-test", round_idx))
    if fresh:
        return test.value_at_empty, test.value_at_empty
    train_val = _pool_return(model, theta, heads, [i for p in pools for i in p],
                             config.eval_episodes,
                             rng.derive_seed(config.seed, "eval-train",
                                             round_idx))
    return train_val, test.value_at_empty


def _pool_return(model, theta, heads, pool, n_episodes, seed) -> float:
    policy = ConsensusPolicy(theta, heads)
    stream = rng.stream(seed, "pool-return")
    total = 0.0
    for j in range(n_episodes):
        inst = pool[min(int(stream.random() * len(pool)), len(pool) - 1)]
        total += run_instance_episode(inst, policy, stream).discounted_return(
            model.discount)
    return total / n_episodes


def train(config: TrainConfig, model: PomdpModel,
          resume: Optional[TrainResult] = None,
          pools: Optional[list] = None,
          log_pools: Optional[dict] = None) -> TrainResult:
    """Collect / update loop until the environment-step budget.

    `resume` continues from an earlier result (same parameter shapes), which
    is also how the continual-learning shift is run. `log_pools` maps extra
    column names to instance pools whose return is logged at each evaluation.
    """
    config.validate()
    gamma = config.effective_gamma(model)
    if config.algo == "inf":
        pools = [[]]
        def fresh_spawner(counter_base):
            def spawn(j):
                return Instance(model, rng.derive_seed(
                    config.seed, "inf-instance", counter_base + j))
            return spawn
    else:
        pools = build_pools(model, config) if pools is None else pools
        fresh_spawner = None

    if resume is None:
        theta, heads = learner.init_params(model, config.num_subsets,
                                           config.seed, config.width)
        adam = AdamState.init(params_as_dict(theta, heads))
        env_steps, update_idx, episode_counter = 0, 0, 0
        next_eval = 0
        last_report = LossReport(0.0, 0.0, 0.0, 0.0, 0.0)
    else:
        theta, heads, adam = resume.theta, resume.heads, resume.adam
        env_steps = resume.meta["env_steps"]
        update_idx = resume.meta["update_idx"]
        episode_counter = resume.meta["episode_counter"]
        next_eval = resume.meta["next_eval"]
        last_report = LossReport(*resume.meta["last_report"])
    log_rows = []

    budget = env_steps + config.total_env_steps
    behavior = _behavior_of(config.algo)
    while True:
        if env_steps >= next_eval:
            row = _log_row(model, theta, heads, pools, config, env_steps,
                           update_idx, last_report, log_pools)
            log_rows.append(row)
            next_eval += config.eval_every
        if env_steps >= budget:
            break
        stream = rng.stream(config.seed, "collect", update_idx)
        spawner = fresh_spawner(episode_counter) if fresh_spawner else None
        batch = collect_rollout(pools, behavior, theta, heads, stream,
                                model.horizon,
                                n_episodes=config.minibatch_episodes,
                                fresh_spawner=spawner)
        episode_counter += len(batch.episodes)
        env_steps += batch.total_steps
        last_report, grads = compute_losses(theta, heads, batch, config, gamma)
        params = params_as_dict(theta, heads)
        adam_update(params, grads, adam, config.learning_rate)
        learner.set_params(theta, heads, params)
        update_idx += 1

    meta = {
        "algo": config.algo, "seed": config.seed, "model": model.name,
        "env_steps": env_steps, "update_idx": update_idx,
        "episode_counter": episode_counter, "next_eval": next_eval,
        "last_report": [last_report.l_v, last_report.l_pi, last_report.reg,
                        last_report.total, last_report.grad_norm],
        "num_subsets": config.num_subsets,
        "instances_per_subset": config.instances_per_subset,
        "instance_set_seed": config.instance_set_seed,
        "width": config.width,
    }
    return TrainResult(theta, heads, adam, meta, log_rows, pools)


def _log_row(model, theta, heads, pools, config, env_steps, update_idx,
             report: LossReport, log_pools: Optional[dict]) -> dict:
    round_idx = update_idx
    train_val, test_val = _evaluate(model, theta, heads, pools, config,
                                    round_idx, fresh=config.algo == "inf")
    row = {
        "step": env_steps, "algo": config.algo, "seed": config.seed,
        "train_return_mean": train_val, "test_return_mean": test_val,
        "l_V": report.l_v, "l_pi": report.l_pi, "grad_norm": report.grad_norm,
    }
    if log_pools:
        for name, pool in log_pools.items():
            row[name] = _pool_return(
                model, theta, heads, pool, config.eval_episodes,
                rng.derive_seed(config.seed, f"eval-{name}", round_idx))
    return row


def continual_shift(result: TrainResult, model: PomdpModel,
                    config: TrainConfig) -> TrainResult:
    """Resume training on a fresh instance partition, logging old/new/test.

    The returned log rows carry `old_train` and `new_train` columns in
    addition to the standard schema.
    """
    if result.theta.w_obs.shape[1] != model.observation_space:
        raise UsageError("checkpoint incompatible with the model")
    shifted = replace(config, instance_set_seed=config.continual_set_seed,
                      total_env_steps=config.continual_steps)
    shifted.validate()
    new_pools = build_pools(model, shifted)
    old_pool = [i for p in result.pools for i in p]
    if not old_pool:
        # the fresh-instance algorithm has no training pool; log a held-out
        # pool in its place so the old/new comparison is well defined
        old_pool = [i for p in build_pools(model, config) for i in p]
    log_pools = {"old_train": old_pool,
                 "new_train": [i for p in new_pools for i in p]}
    return train(shifted, model, resume=result, pools=new_pools,
                 log_pools=log_pools)
