import numpy as np
import pytest

from derl.hard import (
    HardInstanceSpec,
    build_hard_mdp,
    enumerate_family_deterministic,
    expand_policy,
    load_manifest,
    optimal_policy,
    optimal_value,
    save_manifest,
    stationary_expand,
)
from derl.mdp import (
    ConfigurationError,
    DeterministicPolicy,
    enumerate_policies,
    evaluate_policy_exact,
    optimal_value_exact,
)

CORE = (0, 0, 0, 0)


@pytest.fixture
def spec():
    return HardInstanceSpec(4, 4, 3, 2, CORE, 0.1)


def test_layer_shapes(spec):
    inst = build_hard_mdp(spec)
    assert inst.H == spec.H + 1
    assert inst.states_per_layer == [1] + [spec.d + 2] * spec.H
    for h in range(1, inst.H):
        pairs = {tuple(inst.phi[h][s, a]) for s in range(spec.d + 2) for a in range(spec.d)}
        assert len(pairs) == 2 * spec.d + 1
    assert inst.d <= 2 * spec.d + 1


def test_closed_form_optimal_value(spec):
    inst = build_hard_mdp(spec)
    v, pi = optimal_value_exact(inst)
    assert v == pytest.approx(optimal_value(spec), abs=1e-12)
    assert v == pytest.approx((spec.H + 1) / 2 + spec.epsilon, abs=1e-12)
    assert evaluate_policy_exact(inst, optimal_policy(spec)) == pytest.approx(v, abs=1e-12)


def test_every_other_policy_gap_is_epsilon(spec):
    inst = build_hard_mdp(spec)
    v = optimal_value(spec)
    values = np.array([evaluate_policy_exact(inst, p) for p in enumerate_policies(inst)])
    assert (np.abs(values - v) <= 1e-9).sum() == 1
    others = values[np.abs(values - v) > 1e-9]
    np.testing.assert_allclose(others, v - spec.epsilon, atol=1e-9)


@pytest.mark.parametrize(
    "kwargs",
    [
        dict(h_sharp=2, i_sharp=0),  # bumped state equals core
        dict(h_sharp=4, i_sharp=1),  # h_sharp outside [1, H-1]
        dict(h_sharp=1, i_sharp=1, epsilon=0.5),
        dict(h_sharp=1, i_sharp=7),
    ],
)
def test_invalid_specs(kwargs):
    base = dict(d=4, H=4, h_sharp=1, i_sharp=1, core_indices=CORE, epsilon=0.1)
    base.update(kwargs)
    with pytest.raises(ConfigurationError):
        HardInstanceSpec(**base)


def test_family_size_and_null_member():
    fam = enumerate_family_deterministic(4, 4, 0.1)
    assert len(fam) == 3 * 3 + 1
    assert fam[-1].epsilon == 0.0
    assert all(s.epsilon == 0.1 for s in fam[:-1])


def test_family_differs_only_at_bumped_pair():
    fam = enumerate_family_deterministic(4, 4, 0.1)
    null = build_hard_mdp(fam[-1])
    for spec in fam[:-1]:
        inst = build_hard_mdp(spec)
        diff = 0
        for P0, P1 in zip(null.P, inst.P):
            rows = np.abs(P0 - P1).max(axis=-1) > 0
            diff += len({tuple(x) for x in zip(*np.nonzero(rows))})
        # the bumped normal state repeats its single pair over all d actions
        assert diff == spec.d
        for r0, r1 in zip(null.reward, inst.reward):
            np.testing.assert_array_equal(r0, r1)


def test_family_optimal_policies_distinct():
    fam = enumerate_family_deterministic(4, 4, 0.1)[:-1]
    seen = set()
    for spec in fam:
        inst = build_hard_mdp(spec)
        values = {p: evaluate_policy_exact(inst, p) for p in enumerate_policies(inst)}
        best = max(values.values())
        winners = [p for p, v in values.items() if v > best - 1e-9]
        assert len(winners) == 1
        seen.add(winners[0])
    assert len(seen) == len(fam)


def test_manifest_round_trip(tmp_path):
    fam = enumerate_family_deterministic(4, 3, 0.2)
    save_manifest(fam, tmp_path / "m.json")
    assert load_manifest(tmp_path / "m.json") == fam


def test_stationary_expansion_preserves_values(spec):
    inst = build_hard_mdp(spec)
    big = stationary_expand(inst)
    assert big.d == inst.H * inst.d
    assert optimal_value_exact(big)[0] == pytest.approx(optimal_value_exact(inst)[0], abs=1e-12)
    rng = np.random.default_rng(0)
    for _ in range(5):
        pi = DeterministicPolicy.random(inst, rng)
        assert evaluate_policy_exact(big, expand_policy(inst, pi)) == pytest.approx(
            evaluate_policy_exact(inst, pi), abs=1e-12
        )
    # dynamics are the same at every layer
    for h in range(1, big.H - 1):
        np.testing.assert_array_equal(big.P[h], big.P[0])
