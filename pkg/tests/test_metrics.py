import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from instancelab import iape
from instancelab.env import build_gated_corridor
from instancelab.errors import UsageError
from instancelab.instance import Instance
from instancelab.learner import init_params
from instancelab.metrics import (cosine_similarity_heads, delta_time_to_reward,
                                 ensemble_agreement, kl_divergence,
                                 median_offdiagonal, time_averaged_policy)
from instancelab.policies import ConstantPolicy, Policy, ScriptedPolicy


def test_kl_identity_is_zero():
    p = np.array([0.2, 0.5, 0.3])
    assert kl_divergence(p, p) == 0.0


def test_kl_delta_against_even_is_log2():
    assert kl_divergence(np.array([1.0, 0.0]), np.array([0.5, 0.5])) == \
        pytest.approx(math.log(2.0), abs=1e-12)


def test_kl_reports_infinity_for_support_mismatch():
    assert kl_divergence(np.array([0.5, 0.5]), np.array([1.0, 0.0])) \
        == math.inf


def test_kl_rejects_shape_mismatch():
    with pytest.raises(UsageError):
        kl_divergence(np.array([1.0]), np.array([0.5, 0.5]))


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(0.01, 1.0), min_size=2, max_size=6),
       st.lists(st.floats(0.01, 1.0), min_size=2, max_size=6))
def test_kl_nonnegative_property(ws, vs):
    n = min(len(ws), len(vs))
    p = np.array(ws[:n]) / sum(ws[:n])
    q = np.array(vs[:n]) / sum(vs[:n])
    assert kl_divergence(p, q) >= 0.0


@pytest.fixture(scope="module")
def quiet_corridor():
    return build_gated_corridor(5, 0.0, 2, 12, 0.9)


def test_signature_of_constant_policy_is_its_distribution(quiet_corridor):
    inst = Instance(quiet_corridor, 4)
    probs = np.array([0.6, 0.3, 0.1])
    sig = time_averaged_policy(ConstantPolicy(probs), inst, seed=3)
    assert np.allclose(sig.distribution, probs, atol=1e-12)


def test_signature_two_step_mean():
    from instancelab.env import build_bandit

    class TwoStep(Policy):
        def reset(self, o0):
            return 0

        def action_probs(self, t):
            return np.array([1.0, 0.0]) if t == 0 else np.array([0.0, 1.0])

        def advance(self, t, a, o, r):
            return t + 1

    two_round = build_bandit(0.9, 0.1, 2, 2, 0.9)
    sig = time_averaged_policy(TwoStep(), Instance(two_round, 3), seed=1)
    assert np.array_equal(sig.distribution, np.array([0.5, 0.5]))


def test_signature_is_bitwise_reproducible(quiet_corridor):
    inst = Instance(quiet_corridor, 9)
    theta, heads = init_params(quiet_corridor, 2, seed=5, width=8)
    pol = iape.ConsensusPolicy(theta, heads)
    a = time_averaged_policy(pol, inst, seed=42, instance_id=3)
    b = time_averaged_policy(pol, inst, seed=42, instance_id=3)
    assert np.array_equal(a.distribution, b.distribution)


def test_delta_time_identical_policies_is_zero(quiet_corridor):
    pool = [Instance(quiet_corridor, s) for s in range(6)]
    policy = ScriptedPolicy(3, (0,))
    stats = delta_time_to_reward(policy, ScriptedPolicy(3, (0,)), pool, 10.0,
                                 seed=3)
    assert not stats["empty"]
    assert stats["mean"] == 0.0 and set(stats["deltas"]) == {0}


def test_delta_time_one_step_wait_shift(quiet_corridor):
    pool = [Instance(quiet_corridor, s) for s in range(6)]
    base = ScriptedPolicy(3, (0,))
    waiter = ScriptedPolicy(3, (2, 0))  # wait once, then advance forever
    stats = delta_time_to_reward(waiter, base, pool, 10.0, seed=3)
    assert stats["count"] == 6
    assert set(stats["deltas"]) == {1}


def test_delta_time_empty_statistic_flag(quiet_corridor):
    pool = [Instance(quiet_corridor, s) for s in range(3)]
    stuck = ScriptedPolicy(3, (2,))  # waits forever, never succeeds
    stats = delta_time_to_reward(stuck, ScriptedPolicy(3, (0,)), pool, 10.0)
    assert stats["empty"] and stats["count"] == 0


def test_cosine_identical_heads(quiet_corridor):
    theta, heads = init_params(quiet_corridor, 3, seed=2, width=8)
    heads.policy_w[1] = heads.policy_w[0]
    heads.policy_b[1] = heads.policy_b[0]
    sim = cosine_similarity_heads(heads)
    assert sim["policy"][0, 1] == pytest.approx(1.0, abs=1e-12)
    assert np.allclose(sim["policy"], sim["policy"].T)
    assert np.all(np.diag(sim["policy"]) == 1.0)


def test_cosine_negated_pair(quiet_corridor):
    theta, heads = init_params(quiet_corridor, 2, seed=2, width=8)
    heads.value_w[1] = -heads.value_w[0]
    heads.value_b[1] = -heads.value_b[0]
    sim = cosine_similarity_heads(heads)
    assert sim["value"][0, 1] == pytest.approx(-1.0, abs=1e-12)


def test_cosine_zero_norm_flagged(quiet_corridor):
    theta, heads = init_params(quiet_corridor, 2, seed=2, width=8)
    heads.policy_w[1] = 0.0
    heads.policy_b[1] = 0.0
    sim = cosine_similarity_heads(heads)
    assert sim["zero_norm_flagged"]
    assert math.isnan(sim["policy"][0, 1])


def test_cosine_requires_two_heads(quiet_corridor):
    theta, heads = init_params(quiet_corridor, 1, seed=2, width=8)
    with pytest.raises(UsageError):
        cosine_similarity_heads(heads)


def test_median_offdiagonal():
    m = np.array([[1.0, 0.2, 0.4], [0.2, 1.0, 0.6], [0.4, 0.6, 1.0]])
    assert median_offdiagonal(m) == 0.4


def test_agreement_zero_for_equal_heads(quiet_corridor):
    theta, heads = init_params(quiet_corridor, 2, seed=7, width=8)
    heads.policy_w[1] = heads.policy_w[0]
    heads.policy_b[1] = heads.policy_b[0]
    pool = [Instance(quiet_corridor, s) for s in range(4)]
    assert ensemble_agreement(theta, heads, pool, seed=5) == \
        pytest.approx(0.0, abs=1e-12)


def test_agreement_positive_for_distinct_heads(quiet_corridor):
    theta, heads = init_params(quiet_corridor, 2, seed=7, width=8)
    heads.policy_b[1] += 2.0
    pool = [Instance(quiet_corridor, s) for s in range(4)]
    assert ensemble_agreement(theta, heads, pool, seed=5) > 0.0
