"""Quantitative verification targets runnable from the command line.

Each function checks one statement against an exact reference at a stated
tolerance and returns a VerificationReport; the CLI maps pass/fail onto exit
codes. The standard desk-scale configurations live here so the checks are
reproducible from a bare checkout.
"""

from __future__ import annotations

import math
from typing import Optional

import numpy as np

from . import iape, learner, oracle, rng
from .env import PomdpModel, build_bandit, build_gated_corridor
from .errors import UsageError
from .instance import InstanceSet, verify_expected_transition
from .oracle import (enumerate_bandit_instance_universe,
                     verify_generalization_bound, verify_unbiased_value)
from .policies import ConstantPolicy, uniform_policy
from .reports import VerificationReport

BANDIT_ARGS = (0.9, 0.1, 4, 10, 0.9)
CORRIDOR_ARGS = (8, 0.35, 3, 20, 0.9)


def standard_bandit() -> PomdpModel:
    return build_bandit(*BANDIT_ARGS)


def standard_corridor() -> PomdpModel:
    return build_gated_corridor(*CORRIDOR_ARGS)


def _combine(name: str, reports: list, seed: int,
             extra: Optional[dict] = None) -> VerificationReport:
    passed = all(r.passed for r in reports)
    details = {r.name: r.to_json_dict() for r in reports}
    if extra:
        details.update(extra)
    worst = max((r.value / r.tolerance if r.tolerance else 0.0 for r in reports),
                default=0.0)
    return VerificationReport(
        name=name, value=worst, tolerance=1.0, passed=passed, seed=seed,
        nodes_expanded=sum(r.nodes_expanded for r in reports), details=details)


def verify_lemma1(seed: int = 0, n_instances: int = 10_000,
                  repeats: int = 20) -> VerificationReport:
    """Mean instance transition law matches the model law on both environments.

    Also checks that the median L1 error decays monotonically over
    n in {100, 1000, 10000} across `repeats` repeats.
    """
    bandit = standard_bandit()
    corridor = standard_corridor()
    reports = []
    r = verify_expected_transition(bandit, None, (0,), n_instances,
                                   seed=rng.derive_seed(seed, "lemma1-bandit"))
    r.name = "lemma1-bandit-1step"
    reports.append(r)
    r = verify_expected_transition(corridor, None, (0,), n_instances,
                                   seed=rng.derive_seed(seed, "lemma1-corridor"))
    r.name = "lemma1-corridor-1step"
    reports.append(r)

    medians = []
    for idx, n in enumerate((100, 1000, 10_000)):
        errs = [verify_expected_transition(
                    bandit, None, (0,), n,
                    seed=rng.derive_seed(seed, "lemma1-decay", idx * repeats + k)
                ).value for k in range(repeats)]
        medians.append(float(np.median(errs)))
    decay_ok = medians[0] > medians[1] > medians[2]
    reports.append(VerificationReport(
        name="lemma1-median-decay", value=medians[-1], tolerance=medians[0],
        passed=decay_ok, details={"medians": medians, "repeats": repeats}))
    return _combine("lemma1", reports, seed)


def verify_corollary1(seed: int = 0, n_instances: int = 100_000,
                      steps: int = 3) -> VerificationReport:
    """Multi-step joint (r, s, o) law on the corridor matches the tensor law."""
    corridor = standard_corridor()
    r = verify_expected_transition(corridor, None, (0,) * steps, n_instances,
                                   seed=rng.derive_seed(seed, "corollary1"))
    r.name = f"corollary1-corridor-{steps}step"
    return _combine("corollary1", [r], seed)


def verify_lemma2(seed: int = 0, n_sets: int = 2000) -> VerificationReport:
    """Instance-set values of the uniform policy average to the model value."""
    bandit = standard_bandit()
    r = verify_unbiased_value(bandit, uniform_policy(bandit.num_actions),
                              set_size=1, n_sets=n_sets,
                              seed=rng.derive_seed(seed, "lemma2"))
    r.name = "lemma2-bandit-uniform"
    cf = oracle.bandit_closed_forms(*BANDIT_ARGS)
    r.details["closed_form_value"] = cf.v_policy(1.0 / bandit.num_actions)
    return _combine("lemma2", [r], seed)


def verify_lemma3(seed: int = 0, n_seeds: int = 200) -> VerificationReport:
    """Three-part speed-running statement on the single-state environment.

    (a) the belief DP reproduces the closed-form optimal value;
    (b) the mean tree-optimal value over fresh singleton sets clears the
        closed-form lower bound;
    (c) every tree-optimal policy, deployed on the true model, is worth no
        more than the model-optimal value.
    """
    bandit = standard_bandit()
    cf = oracle.bandit_closed_forms(*BANDIT_ARGS)
    _pol, rep = oracle.solve_pomdp_optimal(bandit)
    a_err = abs(rep.value_at_empty - cf.v_state_opt)
    part_a = VerificationReport(
        name="lemma3a-dp-closed-form", value=a_err, tolerance=1e-9,
        passed=a_err <= 1e-9,
        details={"dp": rep.value_at_empty, "closed_form": cf.v_state_opt})

    values, model_values = [], []
    for j in range(n_seeds):
        iset = InstanceSet(bandit, rng.derive_seed(seed, "lemma3-set", j), 1)
        policy, r = oracle.solve_instance_optimal(iset)
        values.append(r.value_at_empty)
        model_values.append(
            oracle.evaluate_policy_on_model(bandit, policy, "exact")
            .value_at_empty)
    mean_v = float(np.mean(values))
    part_b = VerificationReport(
        name="lemma3b-instance-mean", value=mean_v, tolerance=6.038402,
        passed=mean_v >= 6.038402,
        details={"closed_form_lower_bound": cf.v_instance_lower_bound,
                 "n_seeds": n_seeds, "sd": float(np.std(values, ddof=1))})
    worst = float(max(model_values))
    part_c = VerificationReport(
        name="lemma3c-model-value-cap", value=worst,
        tolerance=cf.v_state_opt + 1e-9,
        passed=worst <= cf.v_state_opt + 1e-9,
        details={"mean_model_value": float(np.mean(model_values))})
    # part_b passes when value >= tolerance, unlike the others; encode as ratio
    part_b.value, part_b.tolerance = part_b.tolerance, part_b.value
    out = _combine("lemma3", [part_a, part_b, part_c], seed)
    out.details["mean_instance_value"] = mean_v
    return out


def _lemma4_universe():
    model = build_bandit(0.5, 0.0, 2, 2, 0.9)
    return model, enumerate_bandit_instance_universe(model, max_size=16)


def _lemma4_trainers(model: PomdpModel):
    def constant(_insts):
        probs = np.zeros(model.num_actions)
        probs[0] = 1.0
        return ConstantPolicy(probs)

    def memorizer(insts):
        policy, _ = oracle.solve_instance_optimal(
            oracle._ListSet(model, insts), force_general=True)
        return policy

    def ensemble_trained(insts):
        n = len(insts)
        if n >= 2:
            cfg = iape.TrainConfig(
                algo="iape", num_subsets=2, instances_per_subset=1,
                rollout_n=2, learning_rate=1e-2, lambda_reg=1e-4,
                minibatch_episodes=8, total_env_steps=600,
                eval_every=10**9, eval_episodes=1, width=8, seed=7)
            pools = [[insts[0]], [insts[1]]]
        else:
            cfg = iape.TrainConfig(
                algo="l2", num_subsets=1, instances_per_subset=1,
                rollout_n=2, learning_rate=1e-2, lambda_reg=1e-4,
                minibatch_episodes=8, total_env_steps=600,
                eval_every=10**9, eval_episodes=1, width=8, seed=7)
            pools = [list(insts)]
        result = iape.train(cfg, model, pools=pools)
        return iape.ConsensusPolicy(result.theta, result.heads)

    return {"constant": constant, "memorizer": memorizer,
            "trained": ensemble_trained}


def verify_lemma4(seed: int = 0, set_sizes=(1, 2)) -> VerificationReport:
    """Generalization bound on the enumerable depth-2 universe.

    Checks the bound for a learner that ignores the set, one that memorizes
    it, and an actually-trained ensemble, at each set size; also checks the
    1/sqrt(n) shrinkage of the reported bound at fixed mutual information.
    """
    model, universe = _lemma4_universe()
    reports = []
    shrink_ok = True
    for name, trainer in _lemma4_trainers(model).items():
        bounds_mi = {}
        for n in set_sizes:
            r = verify_generalization_bound(model, n, trainer, universe)
            r.name = f"lemma4-{name}-n{n}"
            if name == "constant":
                r.passed = r.passed and r.details["mi_nats"] == 0.0 \
                    and r.value <= 1e-9
            reports.append(r)
            bounds_mi[n] = (r.details["bound"], r.details["mi_nats"])
        if set(set_sizes) >= {1, 2} and bounds_mi[2][1] <= bounds_mi[1][1]:
            shrink_ok &= bounds_mi[2][0] <= bounds_mi[1][0] / math.sqrt(2) + 1e-12
    reports.append(VerificationReport(
        name="lemma4-bound-shrinkage", value=0.0, tolerance=1.0,
        passed=shrink_ok, details={}))
    return _combine("lemma4", reports, seed,
                    extra={"universe_size": len(universe)})


def _random_gradcheck_case(model: PomdpModel, case_seed: int):
    M = 2
    cfg = iape.TrainConfig(algo="iape", num_subsets=M, instances_per_subset=2,
                           rollout_n=4, w_lo=0.5, w_hi=2.0,
                           lambda_reg=1e-4, lambda_theta=1e-5, width=8,
                           seed=case_seed, instance_set_seed=case_seed)
    theta, heads = learner.init_params(model, M, rng.derive_seed(case_seed,
                                                                 "gc-params"),
                                       width=8)
    pools = iape.build_pools(model, cfg)
    batch = iape.collect_rollout(pools, "consensus", theta, heads,
                                 rng.stream(case_seed, "gc-collect"),
                                 min(model.horizon, 8), n_episodes=4)
    return cfg, theta, heads, batch


def max_relative_fd_error(theta, heads, batch, cfg, gamma: float,
                          step: float = 1e-5) -> float:
    """Max relative error of analytic gradients vs central finite differences."""
    frozen = iape.compute_targets(theta, heads, batch, cfg, gamma)
    _report, grads = iape.compute_losses(theta, heads, batch, cfg, gamma,
                                         frozen)
    params = learner.params_as_dict(theta, heads)
    flat0 = learner.flatten_params(params)
    analytic = learner.flatten_params(grads)

    def loss_at(flat):
        vals = learner.unflatten_params(flat, params)
        th = learner.EncoderParams(vals["w_obs"], vals["w_reward"],
                                   vals["w_action"], vals["w_hidden"],
                                   vals["bias"], theta.reward_scale)
        hd = learner.HeadParams(vals["policy_w"], vals["policy_b"],
                                vals["value_w"], vals["value_b"])
        return iape.surrogate_loss(th, hd, batch, cfg, gamma, frozen)

    numeric = np.empty_like(flat0)
    for i in range(len(flat0)):
        up = flat0.copy()
        up[i] += step
        dn = flat0.copy()
        dn[i] -= step
        numeric[i] = (loss_at(up) - loss_at(dn)) / (2 * step)
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-6)
    return float((np.abs(analytic - numeric) / scale).max())


def verify_gradcheck(seed: int = 0, n_checks: int = 50,
                     tol: float = 1e-4) -> VerificationReport:
    """Finite-difference verification of the full training loss gradient."""
    model = build_gated_corridor(5, 0.4, 2, 10, 0.9)
    worst = 0.0
    for k in range(n_checks):
        cfg, theta, heads, batch = _random_gradcheck_case(
            model, rng.derive_seed(seed, "gradcheck", k))
        err = max_relative_fd_error(theta, heads, batch, cfg,
                                    cfg.effective_gamma(model))
        worst = max(worst, err)
    return VerificationReport(
        name="gradcheck", value=worst, tolerance=tol, passed=worst <= tol,
        seed=seed, details={"n_checks": n_checks})


def plain_nstep_bootstrap(ep: iape.EpisodeRecord, values: np.ndarray,
                          n: int, gamma: float) -> np.ndarray:
    """On-policy n-step bootstrapped targets, no importance weighting.

    Written without any ratio machinery but with the same accumulation order
    as the weighted targets, so the degenerate case can be compared bitwise.
    """
    T = ep.steps
    rewards = ep.rewards.tolist()
    vals = values.tolist()
    out = np.empty(T)
    for tau in range(T):
        hi = min(tau + n, T)
        disc = 1.0
        val = 0.0
        for t in range(tau, hi):
            val += disc * 1.0 * rewards[t]
            disc *= gamma
        if hi < T:
            val += disc * 1.0 * vals[hi]
        elif not ep.terminal:
            val += disc * 1.0 * vals[T]
        out[tau] = val
    return out


def verify_eq15_degenerate(seed: int = 0, n_segments: int = 1000,
                           n_step: int = 4) -> VerificationReport:
    """Identical subset and behavior policies give on-policy targets bitwise."""
    model = build_gated_corridor(5, 0.4, 2, 10, 0.9)
    gamma = model.discount
    checked = 0
    mismatches = 0
    k = 0
    while checked < n_segments:
        case_seed = rng.derive_seed(seed, "eq15", k)
        k += 1
        theta, heads = learner.init_params(model, 1, case_seed, width=8)
        cfg = iape.TrainConfig(algo="base", num_subsets=1,
                               instances_per_subset=2, rollout_n=n_step,
                               lambda_reg=0.0, width=8, seed=case_seed,
                               instance_set_seed=case_seed)
        pools = iape.build_pools(model, cfg)
        batch = iape.collect_rollout(pools, "consensus", theta, heads,
                                     rng.stream(case_seed, "eq15-collect"),
                                     model.horizon, n_episodes=8)
        for b, ep in enumerate(batch.episodes):
            if checked >= n_segments:
                break
            _i, _h, _s, _p, values = iape._forward_batch(
                theta, heads, iape.RolloutBatch([ep]))
            g, _adv, rho = iape._episode_targets(ep, values[0], n_step,
                                                 cfg.w_lo, cfg.w_hi, gamma)
            ref = plain_nstep_bootstrap(ep, values[0], n_step, gamma)
            if not (np.all(rho == 1.0) and np.array_equal(g, ref)):
                mismatches += 1
            checked += 1
    return VerificationReport(
        name="eq15-degenerate", value=float(mismatches), tolerance=0.0,
        passed=mismatches == 0, seed=seed,
        details={"segments": checked})


VERIFY_TARGETS = {
    "lemma1": verify_lemma1,
    "corollary1": verify_corollary1,
    "lemma2": verify_lemma2,
    "lemma3": verify_lemma3,
    "lemma4": verify_lemma4,
    "gradcheck": verify_gradcheck,
    "eq15-degenerate": verify_eq15_degenerate,
}


def run_verify_target(target: str, seed: int = 0, **kwargs) -> VerificationReport:
    if target not in VERIFY_TARGETS:
        raise UsageError(f"unknown verify target {target!r}; expected one of "
                         f"{sorted(VERIFY_TARGETS)}")
    return VERIFY_TARGETS[target](seed=seed, **kwargs)
