import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from derl.lemmas import (
    BatchSequence,
    amgm_check,
    batch_traces,
    elliptical_potential_check,
    fuzz_batched_potential,
    fuzz_elliptical_potential,
    fuzz_matrix_perturbation,
    fuzz_trace_det,
    logdet_telescoping_gap,
    matrix_perturbation_check,
    min_batch_size,
    run_all,
    save_reports,
    trace_det_bridge_check,
    violation_bound,
    violation_set,
)
from derl.mdp import ConfigurationError


def test_all_zero_batches_have_no_violations():
    seq = BatchSequence.from_vectors([np.zeros((5, 3))] * 4)
    assert violation_set(seq, 0.5) == set()


def test_first_e1_batch_violates():
    e1 = np.tile([1.0, 0.0, 0.0], (10, 1))
    seq = BatchSequence.from_vectors([e1, e1])
    assert batch_traces(seq)[0] == pytest.approx(10.0)
    assert 1 in violation_set(seq, 1.0 - 1e-9)
    assert 1 in violation_set(seq, 0.3)


def test_violation_set_rejects_eps():
    seq = BatchSequence.from_vectors([np.zeros((2, 2))])
    for eps in (0.0, 1.0):
        with pytest.raises(ConfigurationError):
            violation_set(seq, eps)


def test_batch_sequence_rejects_long_vectors():
    with pytest.raises(ConfigurationError):
        BatchSequence.from_vectors([np.ones((2, 2))])


def test_weighted_equals_repeated():
    rng = np.random.default_rng(0)
    dirs = rng.standard_normal((3, 2))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    mult = np.array([2, 5, 1])
    a = BatchSequence.from_weighted([(dirs, mult)])
    b = BatchSequence.from_vectors([np.repeat(dirs, mult, axis=0)])
    np.testing.assert_allclose(a.updates[0], b.updates[0], atol=1e-12)
    assert a.sizes == b.sizes == (8,)


def test_violation_bound_and_min_batch_size():
    assert violation_bound(2, 9, 10, 0.5) == np.inf
    assert [min_batch_size(d, 2, 0.5, 2) for d in (2, 3, 4)] == [7908, 20203, 39346]
    n = min_batch_size(3, 2, 0.5, 2)
    K = 2 * 3 * 2 + 1
    assert violation_bound(3, K, n, 0.5) <= 6 < violation_bound(3, K, n - 1, 0.5)


def test_bridge_examples():
    lhs, rhs, ok = trace_det_bridge_check(np.eye(3), np.zeros((3, 3)))
    assert lhs == rhs == 0 and ok
    lhs, rhs, ok = trace_det_bridge_check(np.eye(3), np.diag([1.0, 0, 0]))
    assert lhs == pytest.approx(1.0)
    assert rhs == pytest.approx(2 * np.log(2))
    assert ok


def test_perturbation_zero_delta():
    rep = matrix_perturbation_check(2 * np.eye(3), np.zeros((3, 3)), np.array([0.6, 0.8, 0.0]))
    assert rep.gap_quad == rep.gap_inverse == rep.gap_norm == 0
    assert rep.holds


def test_perturbation_d2_example():
    rep = matrix_perturbation_check(2 * np.eye(2), 0.1 * np.ones((2, 2)), np.array([1.0, 0.0]))
    assert rep.gap_quad == pytest.approx(0.1)
    assert rep.gap_inverse == pytest.approx(1 / 44)
    assert rep.gap_norm == pytest.approx(np.sqrt(0.5) - np.sqrt(2.1 / 4.4))
    assert (rep.bound_quad, rep.bound_inverse) == pytest.approx((0.2, 0.25))
    assert rep.bound_norm == pytest.approx(0.5)
    assert rep.holds and rep.slack_ratio == pytest.approx(0.5)


@pytest.mark.parametrize(
    "A, Delta, phi",
    [
        (0.5 * np.eye(2), np.zeros((2, 2)), np.array([1.0, 0.0])),  # A below I
        (np.eye(2), 0.6 * np.ones((2, 2)), np.array([1.0, 0.0])),  # eps >= 1/d
        (np.eye(2), np.zeros((2, 2)), np.array([1.0, 1.0])),  # long phi
    ],
)
def test_perturbation_preconditions(A, Delta, phi):
    with pytest.raises(ConfigurationError):
        matrix_perturbation_check(A, Delta, phi)


def test_elliptical_potential_examples():
    X = [np.diag([1.0, 0.0])] * 10
    lhs, rhs, ok = elliptical_potential_check(X)
    assert lhs == pytest.approx(sum(1 / (1 + t) for t in range(10)))
    assert ok
    with pytest.raises(ConfigurationError):
        elliptical_potential_check(X, lam=0.5)


def test_logdet_telescoping():
    rng = np.random.default_rng(1)
    batches = []
    for _ in range(20):
        x = rng.standard_normal((50, 4))
        batches.append(x / np.maximum(np.linalg.norm(x, axis=1, keepdims=True), 1.0))
    assert logdet_telescoping_gap(BatchSequence.from_vectors(batches)) <= 1e-6


def test_amgm_random_psd():
    rng = np.random.default_rng(2)
    for _ in range(200):
        g = rng.standard_normal((4, 4))
        assert amgm_check(g @ g.T)[2]
    ld, rhs, ok = amgm_check(np.eye(3))
    assert ld == pytest.approx(0.0) and rhs == pytest.approx(0.0) and ok


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), d=st.integers(1, 6))
def test_bridge_property(seed, d):
    rng = np.random.default_rng(seed)
    g = rng.standard_normal((d, d))
    x = rng.standard_normal((d, d))
    assert trace_det_bridge_check(np.eye(d) + g @ g.T, x @ x.T)[2]


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), d=st.integers(2, 6), frac=st.floats(0.0, 0.99))
def test_perturbation_property(seed, d, frac):
    rng = np.random.default_rng(seed)
    g = rng.standard_normal((d, d))
    eps = frac / d
    Delta = rng.uniform(-eps, eps, (d, d))
    phi = rng.standard_normal(d)
    phi /= max(np.linalg.norm(phi), 1.0)
    assert matrix_perturbation_check(np.eye(d) + g @ g.T, Delta, phi, eps).holds


def test_fuzzers_small_runs():
    for fuzz in (fuzz_trace_det, fuzz_matrix_perturbation, fuzz_elliptical_potential):
        rep = fuzz(2000, seed=3)
        assert rep.trials == 2000 and rep.failures == 0
        assert 0 < rep.max_slack_ratio <= 1 + 1e-9
    rep = fuzz_batched_potential(30, seed=3)
    assert rep.failures == 0 and rep.max_slack_ratio <= 1


def test_fuzzers_are_reproducible(tmp_path):
    a = run_all(seed=5, trials=500, structured_trials=6)
    b = run_all(seed=5, trials=500, structured_trials=6)
    assert a == b
    save_reports(a, tmp_path / "r.json")
    back = json.loads((tmp_path / "r.json").read_text())
    assert {tuple(sorted(r)) for r in back} == {("failures", "max_slack_ratio", "name", "seed", "trials")}
