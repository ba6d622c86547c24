import numpy as np
import pytest

from derl.deterministic import run_deterministic_derl
from derl.hard import build_hard_mdp, enumerate_family_deterministic
from derl.lsvi import CovarianceAccumulator, LayerData, bonus, lsvi_backup, ridge_fit, theoretical_beta
from derl.mdp import (
    ConfigurationError,
    DeterministicPolicy,
    RewardSpec,
    optimal_q_tables,
    optimal_value_exact,
    random_linear_mdp,
    sample_episodes,
    stream,
)


def unit_ball(rng, n, d):
    x = rng.standard_normal((n, d))
    return x / np.maximum(np.linalg.norm(x, axis=1, keepdims=True), 1.0) * rng.uniform(0, 1, (n, 1))


def test_absorb_e1():
    acc = CovarianceAccumulator(3).absorb(np.array([1.0, 0.0, 0.0]))
    np.testing.assert_allclose(acc.gram, np.diag([2.0, 1.0, 1.0]))
    assert acc.logdet == pytest.approx(np.log(2))


def test_absorb_zero_vector():
    acc = CovarianceAccumulator(3)
    acc.absorb(np.zeros(3))
    np.testing.assert_array_equal(acc.gram, np.eye(3))
    np.testing.assert_array_equal(acc.inverse, np.eye(3))


def test_absorb_rejects_long_vector():
    with pytest.raises(ConfigurationError):
        CovarianceAccumulator(2).absorb(np.array([1.0, 1.0]))


def test_thousand_absorbs_match_dense():
    rng = np.random.default_rng(0)
    acc = CovarianceAccumulator(5)
    logdets = [acc.logdet]
    for x in unit_ball(rng, 1000, 5):
        acc.absorb(x)
        logdets.append(acc.logdet)
    assert np.abs(acc.inverse - np.linalg.inv(acc.gram)).max() <= 1e-6
    assert acc.logdet == pytest.approx(np.linalg.slogdet(acc.gram)[1], abs=1e-8)
    assert np.all(np.diff(logdets) >= 0)
    assert np.linalg.eigvalsh(acc.gram).min() >= 1.0 - 1e-8
    # logdet growth bound
    assert acc.logdet <= 5 * np.log(1 + 1000 / 5) + 1e-6


def test_absorb_order_independent():
    rng = np.random.default_rng(1)
    xs = unit_ball(rng, 200, 4)
    a, b = CovarianceAccumulator(4), CovarianceAccumulator(4)
    for x in xs:
        a.absorb(x)
    for x in xs[::-1]:
        b.absorb(x)
    np.testing.assert_allclose(a.gram, b.gram, atol=1e-12)
    assert np.abs(a.inverse - b.inverse).max() <= 1e-6


def test_batch_and_merge_agree_with_absorb():
    rng = np.random.default_rng(2)
    xs = unit_ball(rng, 300, 3)
    seq = CovarianceAccumulator(3)
    for x in xs:
        seq.absorb(x)
    left = CovarianceAccumulator(3).absorb_batch(xs[:100])
    left.merge(CovarianceAccumulator(3).absorb_batch(xs[100:]))
    np.testing.assert_allclose(left.gram, seq.gram, atol=1e-10)
    np.testing.assert_allclose(left.inverse, seq.inverse, atol=1e-10)
    assert left.count == seq.count == 300


def test_bonus_examples():
    acc = CovarianceAccumulator(3)
    assert bonus(acc, np.zeros(3), 5.0, 10.0) == 0.0
    assert bonus(acc, np.array([1.0, 0, 0]), 2.0, 10.0) == pytest.approx(2.0)
    assert bonus(acc, np.array([1.0, 0, 0]), 20.0, 10.0) == 10.0


def test_bonus_shrinks_with_data():
    rng = np.random.default_rng(3)
    probes = unit_ball(rng, 50, 4)
    acc = CovarianceAccumulator(4)
    prev = bonus(acc, probes, 1.0, 100.0)
    for x in unit_ball(rng, 100, 4):
        acc.absorb(x)
        cur = bonus(acc, probes, 1.0, 100.0)
        assert np.all(cur <= prev + 1e-12)
        prev = cur


def test_ridge_examples():
    assert not ridge_fit(CovarianceAccumulator(2), []).any()
    acc = CovarianceAccumulator(2).absorb(np.array([1.0, 0.0]))
    np.testing.assert_allclose(ridge_fit(acc, [(np.array([1.0, 0.0]), 1.0)]), [0.5, 0.0])
    with pytest.raises(ConfigurationError):
        ridge_fit(acc, [])


def test_ridge_recovers_planted_target():
    rng = np.random.default_rng(4)
    w_true = np.array([0.3, -0.7, 0.5, 0.1])
    xs = unit_ball(rng, 10**4, 4)
    acc = CovarianceAccumulator(4).absorb_batch(xs)
    w = ridge_fit(acc, [(x, x @ w_true) for x in xs])
    assert np.linalg.norm(w - w_true) <= 0.01


def test_pure_bonus_backup():
    inst = random_linear_mdp(np.random.default_rng(5), 3, 3, 3, 2)
    data = [LayerData.empty(inst, h) for h in range(1, 4)]
    accs = [CovarianceAccumulator(3) for _ in range(3)]
    qfun, pi = lsvi_backup(inst, data, accs, 3, 0.7, 3.0, RewardSpec.zero(inst))
    for h in range(3):
        expect = np.minimum(0.7 * np.linalg.norm(inst.phi[h], axis=-1), 3.0)
        np.testing.assert_allclose(qfun.q[h], expect, atol=1e-12)
        np.testing.assert_array_equal(pi.actions[h], np.argmax(expect, axis=1))


def test_exhaustive_data_matches_dp():
    inst = random_linear_mdp(np.random.default_rng(6), 3, 3, 3, 2)
    data = [LayerData.empty(inst, h) for h in range(1, 4)]
    rng = stream(7)
    for h in range(1, inst.H + 1):
        S = inst.states_per_layer[h - 1]
        for s in range(S):
            for a in range(inst.num_actions):
                nxt = None
                if h < inst.H:
                    nxt = rng.choice(inst.states_per_layer[h], size=10**4, p=inst.P[h - 1][s, a])
                data[h - 1].add(np.full(10**4, s), np.full(10**4, a), nxt)
    accs = [data[h].accumulator(inst.phi[h]) for h in range(3)]
    qfun, pi = lsvi_backup(inst, data, accs, 3, 0.0, 3.0)
    q_star = optimal_q_tables(inst)
    assert np.abs(qfun.q[0] - q_star[0]).max() <= 0.02
    assert qfun.initial_value(inst) == pytest.approx(optimal_value_exact(inst)[0], abs=0.02)


def test_backup_is_deterministic_and_ties_low_index():
    inst = random_linear_mdp(np.random.default_rng(8), 2, 2, 2, 3)
    data = [LayerData.empty(inst, h) for h in (1, 2)]
    accs = [CovarianceAccumulator(2) for _ in range(2)]
    a = lsvi_backup(inst, data, accs, 2, 0.0, 2.0, RewardSpec.zero(inst))[1]
    # every Q is 0, so argmax picks action 0 everywhere
    assert all(not x.any() for x in a.actions)


def test_layer_data_counts_and_gram():
    inst = random_linear_mdp(np.random.default_rng(9), 3, 2, 3, 2)
    pi_batch = sample_episodes(inst, DeterministicPolicy.constant(inst), 500, stream(1), uniform_after=0)
    d = LayerData.empty(inst, 1)
    d.add(pi_batch.states[0], pi_batch.actions[0], pi_batch.states[1])
    assert d.n == 500
    f = inst.phi[0][pi_batch.states[0], pi_batch.actions[0]]
    np.testing.assert_allclose(d.gram(inst.phi[0]), f.T @ f, atol=1e-10)


def test_overestimation_with_theoretical_beta():
    inst = build_hard_mdp(enumerate_family_deterministic(4, 4, 0.1)[0])
    beta = theoretical_beta(inst.d, inst.H, 0.1, 0.1, c_beta=0.5)
    opt = {h: optimal_value_exact(inst, h_trunc=h)[0] for h in range(1, inst.H + 1)}
    ok = 0
    for seed in range(100):
        _, log = run_deterministic_derl(inst, None, 0.1, 0.1, 2, 2000, beta, seed=seed)
        last = log.records[-1]
        ok += last.value_estimate >= opt[last.h_k] - 1e-12
    assert ok >= 95
