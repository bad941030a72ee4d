import itertools
import json
import math

import numpy as np
import pytest

from instancelab import rng
from instancelab.belief import init_belief
from instancelab.env import build_bandit
from instancelab.errors import BudgetExceededError, UsageError
from instancelab.instance import InstanceSet
from instancelab.oracle import (bandit_closed_forms, canonical_greedy_table,
                                enumerate_bandit_instance_universe,
                                evaluate_policy_on_instances,
                                evaluate_policy_on_model, initial_obs_dist,
                                solve_instance_optimal, solve_pomdp_optimal,
                                verify_generalization_bound,
                                verify_unbiased_value, _ListSet)
from instancelab.policies import (ConstantPolicy, ScriptedPolicy,
                                  uniform_policy)
from instancelab.reports import ValueReport, VerificationReport

from conftest import (BANDIT_ARGS, CORRIDOR_OPTIMAL_VALUE,
                      make_noisy_tiny, make_two_state_chain)


def test_closed_forms_pin_the_reference_values():
    cf = bandit_closed_forms(*BANDIT_ARGS)
    assert abs(cf.v_state_opt - 5.861894039100) <= 1e-9
    assert abs(cf.v_instance_lower_bound - 6.038402182) <= 1e-6
    assert abs(cf.v_policy(0.25) - 1.953964680) <= 1e-9
    assert cf.v_policy(1.0) == cf.v_state_opt


def test_closed_forms_undiscounted_limit():
    cf = bandit_closed_forms(1.0, 0.0, 2, 5, 1.0)
    assert cf.v_state_opt == 5.0


def test_closed_forms_reject_bad_arguments():
    with pytest.raises(UsageError):
        bandit_closed_forms(0.5, 0.5, 4, 10, 0.9)
    with pytest.raises(UsageError):
        bandit_closed_forms(0.9, 0.1, 1, 10, 0.9)


def test_belief_dp_reproduces_bandit_closed_form(bandit):
    _policy, report = solve_pomdp_optimal(bandit)
    assert abs(report.value_at_empty - 5.861894039100) <= 1e-9


def test_myopic_limit_at_zero_discount():
    model = make_noisy_tiny(gamma=0.0, horizon=3)
    _policy, report = solve_pomdp_optimal(model)
    # gamma = 0: optimal value is the best one-step expected reward after o0,
    # averaged over the initial observation
    p0 = initial_obs_dist(model)
    expect = 0.0
    for o0 in np.nonzero(p0)[0]:
        b = init_belief(model, int(o0))
        best = max(
            sum(b.state_marginal()[s] * model.transition[s, a, 1, :].sum()
                for s in range(model.num_states))
            for a in range(model.num_actions))
        expect += p0[o0] * best
    assert abs(report.value_at_empty - expect) <= 1e-12


def test_corridor_optimal_value_is_pinned(corridor):
    policy, report = solve_pomdp_optimal(corridor)
    assert abs(report.value_at_empty - CORRIDOR_OPTIMAL_VALUE) <= 1e-12
    mc = evaluate_policy_on_model(corridor, policy, "monte-carlo",
                                  n_episodes=100_000, seed=99)
    assert abs(mc.value_at_empty - report.value_at_empty) <= 3 * mc.stderr


def test_node_budget_error_carries_count(corridor):
    with pytest.raises(BudgetExceededError) as err:
        solve_pomdp_optimal(corridor, node_budget=10)
    assert err.value.nodes_expanded == 11


def test_singleton_deterministic_set_value_is_best_leaf():
    chain = make_two_state_chain(gamma=0.9, horizon=4)
    iset = InstanceSet(chain, 5, 1)
    _policy, report = solve_instance_optimal(iset)
    best = -1.0
    for seq in itertools.product(range(2), repeat=4):
        path = iset[0].query(seq)
        value = sum(r.reward * 0.9**t for t, r in enumerate(path[1:]))
        best = max(best, value)
    assert abs(report.value_at_empty - best) <= 1e-12


def test_singleton_fast_path_matches_general_recursion(bandit, small_corridor):
    for model, seed in ((bandit, 3), (small_corridor, 4)):
        iset = InstanceSet(model, seed, 1)
        _p1, fast = solve_instance_optimal(iset, horizon=6)
        _p2, general = solve_instance_optimal(iset, horizon=6,
                                              force_general=True)
        assert fast.value_at_empty == general.value_at_empty


def test_instance_policy_evaluates_back_to_its_dp_value(bandit):
    iset = InstanceSet(bandit, 42, 1)
    policy, report = solve_instance_optimal(iset)
    back = evaluate_policy_on_instances(iset, policy, "exact")
    assert back.value_at_empty == report.value_at_empty


def test_instance_policy_evaluates_back_multi_instance(small_corridor):
    iset = InstanceSet(small_corridor, 9, 4)
    policy, report = solve_instance_optimal(iset, horizon=6)
    back = evaluate_policy_on_instances(iset, policy, "exact", horizon=6)
    assert abs(back.value_at_empty - report.value_at_empty) <= 1e-12


def test_history_policies_beat_belief_policies_on_sets(bandit, small_corridor):
    # the instance-optimal policy searches a superset of the belief policies
    for model, horizon, sizes, n_cases in ((bandit, 5, (1, 2, 4), 30),
                                           (small_corridor, 6, (2, 4), 20)):
        belief_policy, _ = solve_pomdp_optimal(model, horizon=horizon)
        for j in range(n_cases):
            iset = InstanceSet(model, rng.derive_seed(7, "l3", j),
                               sizes[j % len(sizes)])
            _pi, opt = solve_instance_optimal(iset, horizon=horizon)
            via_belief = evaluate_policy_on_instances(
                iset, belief_policy, "exact", horizon=horizon)
            assert via_belief.value_at_empty <= opt.value_at_empty + 1e-9


def test_instance_policies_capped_by_model_optimum(bandit):
    _bp, vstar = solve_pomdp_optimal(bandit)
    for j in range(30):
        iset = InstanceSet(bandit, rng.derive_seed(11, "cap", j), 1)
        policy, _ = solve_instance_optimal(iset)
        on_model = evaluate_policy_on_model(bandit, policy, "exact")
        assert on_model.value_at_empty <= vstar.value_at_empty + 1e-9


def test_exact_policy_value_closed_forms(bandit):
    always0 = ConstantPolicy([1.0, 0.0, 0.0, 0.0])
    v = evaluate_policy_on_model(bandit, always0, "exact")
    assert abs(v.value_at_empty - 5.861894039100) <= 1e-9
    v_uni = evaluate_policy_on_model(bandit, uniform_policy(4), "exact")
    assert abs(v_uni.value_at_empty - 1.953964680) <= 1e-9


def test_monte_carlo_agrees_with_exact(bandit):
    exact = evaluate_policy_on_model(bandit, uniform_policy(4), "exact")
    mc = evaluate_policy_on_model(bandit, uniform_policy(4), "monte-carlo",
                                  n_episodes=1_000_000, seed=21)
    assert abs(mc.value_at_empty - exact.value_at_empty) <= 3 * mc.stderr


def test_monte_carlo_requires_episodes(bandit):
    with pytest.raises(UsageError):
        evaluate_policy_on_model(bandit, uniform_policy(4), "monte-carlo",
                                 n_episodes=0)
    with pytest.raises(UsageError):
        evaluate_policy_on_model(bandit, uniform_policy(4), "bogus")


def test_singleton_always_arm0_value_matches_tree_readout(bandit):
    iset = InstanceSet(bandit, 8, 1)
    policy = ScriptedPolicy(4, (0,))
    got = evaluate_policy_on_instances(iset, policy, "exact")
    path = iset[0].query((0,) * 10)
    expect = sum(r.reward * 0.9**t for t, r in enumerate(path[1:]))
    assert abs(got.value_at_empty - expect) <= 1e-12


def test_static_and_recursive_instance_evaluation_agree(bandit, small_corridor):
    for model, seed, horizon in ((bandit, 4, 7), (small_corridor, 6, 8)):
        iset = InstanceSet(model, seed, 2)
        uni = uniform_policy(model.num_actions)
        fast = evaluate_policy_on_instances(iset, uni, "exact",
                                            horizon=horizon).value_at_empty
        slow = 0.0
        from instancelab.oracle import _exact_instance_value
        for inst in iset.instances:
            slow += _exact_instance_value(inst, uni, horizon, 10**7, 0.0)[0]
        assert abs(fast - slow / 2) <= 1e-9


def test_instance_monte_carlo_agrees_with_exact(bandit):
    iset = InstanceSet(bandit, 15, 3)
    uni = uniform_policy(4)
    exact = evaluate_policy_on_instances(iset, uni, "exact")
    mc = evaluate_policy_on_instances(iset, uni, "monte-carlo",
                                      n_episodes=40_000, seed=2)
    assert abs(mc.value_at_empty - exact.value_at_empty) <= 3 * mc.stderr


def test_unbiased_value_deterministic_model_zero_z():
    chain = make_two_state_chain(gamma=0.9, horizon=4)
    rep = verify_unbiased_value(chain, ScriptedPolicy(2, (0, 1, 0, 1)),
                                set_size=1, n_sets=50, seed=3)
    assert rep.passed and rep.value == 0.0


def test_unbiased_value_bandit_uniform_policy(bandit):
    rep = verify_unbiased_value(bandit, uniform_policy(4), set_size=1,
                                n_sets=400, seed=5)
    assert rep.passed
    assert abs(rep.details["model_value"] - 1.953964680) <= 1e-9


def test_generalization_bound_constant_learner():
    model = build_bandit(0.5, 0.0, 2, 2, 0.9)
    universe = enumerate_bandit_instance_universe(model)
    assert len(universe) == 8
    assert abs(sum(p for _i, p in universe) - 1.0) <= 1e-12

    def constant(_insts):
        return ConstantPolicy([1.0, 0.0])

    rep = verify_generalization_bound(model, 1, constant, universe)
    assert rep.passed
    assert rep.details["mi_nats"] == 0.0
    assert rep.value <= 1e-9  # exact-evaluation mode makes the gap vanish


def test_generalization_bound_memorizing_learner():
    model = build_bandit(0.5, 0.0, 2, 2, 0.9)
    universe = enumerate_bandit_instance_universe(model)

    def memorizer(insts):
        policy, _ = solve_instance_optimal(_ListSet(model, insts),
                                           force_general=True)
        return policy

    r1 = verify_generalization_bound(model, 1, memorizer, universe)
    r2 = verify_generalization_bound(model, 2, memorizer, universe)
    assert r1.passed and r2.passed
    assert r1.details["mi_nats"] > 0
    assert r1.details["expected_abs_gap"] > 0
    if r2.details["mi_nats"] <= r1.details["mi_nats"]:
        assert r2.details["bound"] <= r1.details["bound"] / math.sqrt(2) + 1e-12


def test_bound_shrinks_like_inverse_sqrt_n():
    model = build_bandit(0.5, 0.0, 2, 2, 0.9)
    c = 2.0 * model.value_bound()
    mi = 1.25
    b1 = math.sqrt(2 * c * c * mi / 1)
    b2 = math.sqrt(2 * c * c * mi / 2)
    assert b2 == pytest.approx(b1 / math.sqrt(2), abs=1e-15)


def test_universe_enumeration_rejects_large_spaces(bandit):
    with pytest.raises(UsageError):
        enumerate_bandit_instance_universe(bandit, max_size=16)


def test_canonical_table_breaks_ties_toward_low_index():
    model = build_bandit(0.5, 0.0, 2, 1, 0.9)
    table = canonical_greedy_table(model, uniform_policy(2))
    assert all(action == 0 for _code, action in table)


def test_reports_serialize_with_contract_fields(tmp_path):
    rep = VerificationReport(name="x", value=1.0, tolerance=2.0, passed=True,
                             stderr=0.1, nodes_expanded=5, seed=9)
    path = tmp_path / "r.json"
    rep.save(path)
    doc = json.loads(path.read_text())
    assert set(doc) >= {"value", "stderr", "tolerance", "pass",
                        "nodes_expanded", "seed"}
    vr = ValueReport(value_at_empty=1.5, stderr=None, nodes_expanded=3,
                     per_node_values={0: 1.0})
    assert vr.to_json_dict()["value"] == 1.5
