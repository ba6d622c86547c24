import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from derl.hard import HardInstanceSpec, build_hard_mdp, optimal_path, optimal_policy
from derl.mdp import (
    ConfigurationError,
    DeterministicPolicy,
    LinearMDP,
    MixturePolicy,
    NumericError,
    RewardSpec,
    bandit_mdp,
    chain_mdp,
    enumerate_policies,
    evaluate_policy_exact,
    expected_covariance,
    occupancy,
    optimal_value_exact,
    random_linear_mdp,
    sample_episode,
    sample_episodes,
    stream,
    uncertainty_diagnostic,
)


@pytest.fixture
def small():
    return random_linear_mdp(np.random.default_rng(3), 3, 3, 3, 2)


def test_instance_invariants_hold_for_generated(small):
    for f in small.phi:
        assert np.linalg.norm(f, axis=-1).max() <= 1 + 1e-12
    for P in small.P:
        assert P.min() >= 0
        np.testing.assert_allclose(P.sum(axis=-1), 1.0, atol=1e-9)
    for r in small.reward:
        assert r.min() >= 0 and r.max() <= 1


def test_rejects_bad_feature_norm():
    phi = (np.full((1, 1, 2), 0.9),)
    with pytest.raises(ConfigurationError):
        LinearMDP(2, 1, 1, phi, (), np.zeros((1, 2)), np.ones(1))


def test_rejects_non_simplex_transition():
    phi = (np.array([[[1.0, 0.0]]]), np.array([[[1.0, 0.0]]]))
    mu = (np.array([[0.7, 0.0]]),)  # mass 0.7
    with pytest.raises(ConfigurationError):
        LinearMDP(2, 2, 1, phi, mu, np.zeros((2, 2)), np.ones(1))


def test_json_round_trip(small, tmp_path):
    path = tmp_path / "inst.json"
    small.save(path)
    back = LinearMDP.load(path)
    assert back.states_per_layer == small.states_per_layer
    for a, b in zip(back.phi, small.phi):
        np.testing.assert_array_equal(a, b)
    keys = set(json.loads(path.read_text()))
    assert keys == {"d", "H", "num_actions", "states_per_layer", "phi", "mu", "theta", "init"}


def test_zero_reward_chain_episode_has_zero_rewards():
    inst = chain_mdp(2, 4, feature=[1.0, 0.0])
    traj = sample_episode(inst, DeterministicPolicy.constant(inst), stream(0))
    assert len(traj.steps) == 4
    assert all(step[3] == 0.0 for step in traj.steps)
    assert [step[0] for step in traj.steps] == [1, 2, 3, 4]


def test_optimal_path_in_hard_instance():
    spec = HardInstanceSpec(4, 4, 2, 2, (0, 0, 0, 0), 0.1)
    inst = build_hard_mdp(spec)
    traj = sample_episode(inst, optimal_policy(spec), stream(5))
    path = optimal_path(spec)
    assert list(traj.states[: len(path)]) == path
    assert set(traj.states[len(path) :]) <= {0, 1}  # absorbing afterwards


def test_fixed_seed_is_reproducible(small):
    pi = DeterministicPolicy.random(small, np.random.default_rng(0))
    a = sample_episodes(small, pi, 50, stream(9, 1))
    b = sample_episodes(small, pi, 50, stream(9, 1))
    np.testing.assert_array_equal(a.states, b.states)
    np.testing.assert_array_equal(a.actions, b.actions)


def test_policy_missing_states_is_rejected(small):
    bad = DeterministicPolicy(tuple(np.zeros(1, dtype=np.int64) for _ in range(small.H)))
    with pytest.raises(ConfigurationError):
        sample_episode(small, bad, stream(0))


def test_trajectory_rewards_match_table(small):
    pi = DeterministicPolicy.random(small, np.random.default_rng(2))
    traj = sample_episode(small, pi, stream(4))
    for h, s, a, r, _ in traj.steps:
        assert r == small.reward[h - 1][s, a]


def test_zero_reward_value_is_zero(small):
    pi = DeterministicPolicy.random(small, np.random.default_rng(1))
    assert evaluate_policy_exact(small, pi, RewardSpec.zero(small)) == 0.0
    v, _ = optimal_value_exact(small, RewardSpec.zero(small))
    assert v == 0.0


def test_optimal_value_dominates_random_policies(small):
    v, pi_star = optimal_value_exact(small)
    assert evaluate_policy_exact(small, pi_star) == v
    rng = np.random.default_rng(0)
    for _ in range(100):
        assert evaluate_policy_exact(small, DeterministicPolicy.random(small, rng)) <= v + 1e-12


def test_optimal_value_matches_enumeration(small):
    v, _ = optimal_value_exact(small)
    best = max(evaluate_policy_exact(small, p) for p in enumerate_policies(small))
    assert best == pytest.approx(v, abs=1e-12)


def test_mixture_value_is_member_mean(small):
    rng = np.random.default_rng(8)
    members = tuple(DeterministicPolicy.random(small, rng) for _ in range(4))
    mix = MixturePolicy(members)
    mean = np.mean([evaluate_policy_exact(small, m) for m in members])
    assert evaluate_policy_exact(small, mix) == pytest.approx(mean, abs=1e-15)


def test_truncated_value(small):
    pi = DeterministicPolicy.constant(small)
    v1 = evaluate_policy_exact(small, pi, h_trunc=1)
    assert v1 == pytest.approx(small.init @ small.reward[0][:, 0])
    with pytest.raises(ConfigurationError):
        evaluate_policy_exact(small, pi, h_trunc=0)


def test_monte_carlo_return_within_hoeffding_band(small):
    pi = DeterministicPolicy.random(small, np.random.default_rng(11))
    n = 10**5
    batch = sample_episodes(small, pi, n, stream(12))
    band = 3 * (small.H / np.sqrt(n)) * 2
    assert abs(batch.rewards.sum(axis=0).mean() - evaluate_policy_exact(small, pi)) <= band


def test_expected_covariance_single_state():
    inst = chain_mdp(3, 2, feature=[1.0, 0.0, 0.0])
    cov = expected_covariance(inst, DeterministicPolicy.constant(inst), 1)
    np.testing.assert_array_equal(cov, np.diag([1.0, 0.0, 0.0]))


def test_expected_covariance_symmetric_trace_and_monte_carlo(small):
    pi = DeterministicPolicy.random(small, np.random.default_rng(6))
    batch = sample_episodes(small, pi, 10**5, stream(7))
    for h in range(1, small.H + 1):
        cov = expected_covariance(small, pi, h)
        np.testing.assert_array_equal(cov, cov.T)
        assert np.trace(cov) <= 1 + 1e-12
        f = small.phi[h - 1][batch.states[h - 1], batch.actions[h - 1]]
        assert np.abs(f.T @ f / batch.n - cov).max() <= 0.02


def test_uncertainty_diagnostic_limits():
    inst = chain_mdp(1, 1, feature=[1.0])
    assert uncertainty_diagnostic(inst, [np.eye(1)], 1) == pytest.approx(1.0)
    small = random_linear_mdp(np.random.default_rng(0), 3, 3, 3, 2)
    big = [1e12 * np.eye(3)] * 3
    assert uncertainty_diagnostic(small, big, 3) < 1e-5


def test_uncertainty_diagnostic_matches_enumeration():
    inst = random_linear_mdp(np.random.default_rng(21), 3, 3, 3, 2)
    rng = np.random.default_rng(22)
    sigmas = []
    for _ in range(3):
        g = rng.standard_normal((3, 3))
        sigmas.append(np.eye(3) + g @ g.T)
    inv = [np.linalg.inv(s) for s in sigmas]
    best = 0.0
    for p in enumerate_policies(inst):
        total = 0.0
        for h, dist in enumerate(occupancy(inst, p), start=1):
            f = inst.phi[h - 1][np.arange(len(dist)), p.actions[h - 1]]
            total += dist @ np.sqrt(np.einsum("sd,de,se->s", f, inv[h - 1], f))
        best = max(best, total)
    assert uncertainty_diagnostic(inst, sigmas, 3) == pytest.approx(best, abs=1e-9)


def test_uncertainty_diagnostic_rejects_singular(small):
    with pytest.raises(NumericError):
        uncertainty_diagnostic(small, [np.zeros((3, 3))] * 3, 3)


def test_bandit_generator():
    inst = bandit_mdp(3)
    assert inst.H == 1 and inst.num_actions == 3
    assert evaluate_policy_exact(inst, DeterministicPolicy.constant(inst, 2)) == 0.5


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10**6), states=st.integers(1, 4), actions=st.integers(1, 3))
def test_random_instances_always_valid(seed, states, actions):
    inst = random_linear_mdp(np.random.default_rng(seed), 3, 3, states, actions)
    inst.check_assumptions()
    v, pi = optimal_value_exact(inst)
    assert 0.0 <= v <= inst.H
    assert evaluate_policy_exact(inst, pi) == v
