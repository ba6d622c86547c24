"""Layered lower-bound instances and the stationary state-space expansion.

Built-instance layout (1-based layers): layer 1 holds only the start state
``s0`` whose ``d`` actions lead deterministically to the normal/core states of
layer 2.  Template layer ``t`` (``1 <= t <= H``) becomes built layer ``t + 1``,
so the built horizon is ``H + 1``.  Inside a template layer the states are
ordered ``[u1, u2, s^1, ..., s^d]``.  Every state exposes ``d`` actions;
single-action states repeat their one (feature, transition) pair so the
instance keeps a single action set.

Features are one-hot over the ``2d + 1`` distinct state-action pairs of a
layer: index 0 is ``u1``, 1 is ``u2``, ``2..d`` are the ``d - 1`` normal
states in index order (skipping the core) and ``d + 1 + a`` is action ``a``
of the core state.  ``s0``'s action ``a`` also uses index ``d + 1 + a``.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .mdp import ConfigurationError, DeterministicPolicy, LinearMDP

U1, U2 = 0, 1


@dataclass(frozen=True)
class HardInstanceSpec:
    """``core_indices[t-1]`` is the core state of template layer ``t`` (0-based index into ``s^1..s^d``).

    ``h_sharp`` is the template layer of the bumped normal state and
    ``i_sharp`` its 0-based index.  ``epsilon == 0`` encodes the null instance."""

    d: int
    H: int
    h_sharp: int
    i_sharp: int
    core_indices: tuple[int, ...]
    epsilon: float

    def __post_init__(self):
        object.__setattr__(self, "core_indices", tuple(int(i) for i in self.core_indices))
        if self.d < 2:
            raise ConfigurationError("need d >= 2 normal states per layer")
        if self.H < 2:
            raise ConfigurationError("template horizon must be at least 2")
        if len(self.core_indices) != self.H:
            raise ConfigurationError("need one core index per template layer")
        if any(not 0 <= i < self.d for i in self.core_indices):
            raise ConfigurationError("core index out of range")
        if not 1 <= self.h_sharp <= self.H - 1:
            raise ConfigurationError("h_sharp must lie in [1, H-1]")
        if not 0 <= self.i_sharp < self.d:
            raise ConfigurationError("i_sharp out of range")
        if self.core_indices[self.h_sharp - 1] == self.i_sharp:
            raise ConfigurationError("the bumped state cannot be the core state")
        if not 0.0 <= self.epsilon < 0.5:
            raise ConfigurationError("epsilon must lie in [0, 0.5)")

    @property
    def feature_dim(self) -> int:
        return 2 * self.d + 1

    @property
    def horizon(self) -> int:
        return self.H + 1

    def to_dict(self) -> dict:
        out = asdict(self)
        out["core_indices"] = list(self.core_indices)
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "HardInstanceSpec":
        return cls(**{**data, "core_indices": tuple(data["core_indices"])})


def save_manifest(specs: Sequence[HardInstanceSpec], path) -> None:
    Path(path).write_text(json.dumps([s.to_dict() for s in specs], indent=1))


def load_manifest(path) -> list[HardInstanceSpec]:
    return [HardInstanceSpec.from_dict(x) for x in json.loads(Path(path).read_text())]


def _pair_index(spec: HardInstanceSpec, t: int, state: int, action: int) -> int:
    """Feature index of (state, action) in template layer ``t``."""
    if state in (U1, U2):
        return state
    i = state - 2
    core = spec.core_indices[t - 1]
    if i == core:
        return spec.d + 1 + action
    return 2 + (i if i < core else i - 1)


def build_hard_mdp(spec: HardInstanceSpec) -> LinearMDP:
    d, H, D = spec.d, spec.H, spec.feature_dim
    n = d + 2
    eye = np.eye(D)

    phi = [eye[d + 1 : 2 * d + 1][None].copy()]
    for t in range(1, H + 1):
        f = np.zeros((n, d, D))
        for s in range(n):
            for a in range(d):
                f[s, a] = eye[_pair_index(spec, t, s, a)]
        phi.append(f)

    mu = []
    # s0 -> s^i of template layer 1
    m = np.zeros((n, D))
    for i in range(d):
        m[2 + i, d + 1 + i] = 1.0
    mu.append(m)
    for t in range(1, H):
        m = np.zeros((n, D))
        m[U1, U1] = 1.0
        m[U2, U2] = 1.0
        for i in range(d):
            m[2 + i, d + 1 + i] = 1.0  # core action i -> s^i
            if i == spec.core_indices[t - 1]:
                continue
            col = _pair_index(spec, t, 2 + i, 0)
            bump = spec.epsilon if (t == spec.h_sharp and i == spec.i_sharp) else 0.0
            m[U1, col] = 0.5 - bump
            m[U2, col] = 0.5 + bump
        mu.append(m)

    theta = np.full((H + 1, D), 0.5)
    theta[H, U1] = 0.0
    theta[H, U2] = 1.0
    return LinearMDP(D, H + 1, d, tuple(phi), tuple(mu), theta, np.ones(1))


def optimal_path(spec: HardInstanceSpec) -> list[int]:
    """Built-instance state indices of the optimal path: ``s0, s_1^{i_1}, ..., s_{h#}^{i#}``."""
    path = [0] + [2 + spec.core_indices[t - 1] for t in range(1, spec.h_sharp)]
    return path + [2 + spec.i_sharp]


def optimal_policy(spec: HardInstanceSpec) -> DeterministicPolicy:
    """Canonical optimal policy: thread the core chain, then step into ``s#``."""
    n = spec.d + 2
    acts = [np.array([spec.core_indices[0] if spec.h_sharp > 1 else spec.i_sharp])]
    for t in range(1, spec.H + 1):
        a = np.zeros(n, dtype=np.int64)
        if t < spec.h_sharp:
            core = 2 + spec.core_indices[t - 1]
            a[core] = spec.core_indices[t] if t + 1 < spec.h_sharp else spec.i_sharp
        acts.append(a)
    return DeterministicPolicy(tuple(acts))


def optimal_value(spec: HardInstanceSpec) -> float:
    """Closed form: every step pays 0.5 in expectation, plus the bump."""
    return 0.5 * (spec.H + 1) + spec.epsilon


def enumerate_family_deterministic(d: int, H: int, epsilon: float) -> list[HardInstanceSpec]:
    """Fixed core path ``s^1`` in every layer; the bump ranges over all ``(d-1)(H-1)`` normal states.

    The last entry is the null instance (``epsilon = 0``)."""
    if d < 4 or H < 3:
        raise ConfigurationError("the family needs d >= 4 and H >= 3")
    core = tuple([0] * H)
    family = [
        HardInstanceSpec(d, H, h, i, core, epsilon) for h in range(1, H) for i in range(1, d)
    ]
    family.append(HardInstanceSpec(d, H, 1, 1, core, 0.0))
    return family


def stationary_expand(instance: LinearMDP) -> LinearMDP:
    """Stationary instance over ``S x [H]`` with block-indicator features of dimension ``H * d``.

    Every layer of the result carries the full expanded state set (state
    ``(s, j)`` is stored at index ``offset[j] + s``) and the same ``phi``,
    ``mu`` and ``theta``.  Copies of the last layer need a valid transition
    row; they move to expanded state 0 of their own block, using a vector
    ``m`` with ``<phi_H(s,a), m> = 1`` found by least squares.
    """
    H, d = instance.H, instance.d
    sizes = instance.states_per_layer
    offset = np.concatenate([[0], np.cumsum(sizes)])
    total = int(offset[-1])
    D = H * d

    phi = np.zeros((total, instance.num_actions, D))
    for j in range(H):
        phi[offset[j] : offset[j + 1], :, j * d : (j + 1) * d] = instance.phi[j]

    mu = np.zeros((total, D))
    for j in range(H - 1):
        mu[offset[j + 1] : offset[j + 2], j * d : (j + 1) * d] = instance.mu[j]
    last = instance.phi[H - 1].reshape(-1, d)
    m, *_ = np.linalg.lstsq(last, np.ones(len(last)), rcond=None)
    if np.abs(last @ m - 1.0).max() > 1e-9:
        raise ConfigurationError("last-layer features admit no linear unit-mass functional")
    mu[offset[H - 1], (H - 1) * d :] = m

    theta = instance.theta.reshape(-1)
    init = np.zeros(total)
    init[: sizes[0]] = instance.init
    return LinearMDP(
        D, H, instance.num_actions, tuple(phi for _ in range(H)), tuple(mu for _ in range(H - 1)),
        np.tile(theta, (H, 1)), init,
    )


def expand_policy(instance: LinearMDP, policy: DeterministicPolicy) -> DeterministicPolicy:
    """Lift a layered policy onto the expanded state set (off-block copies take action 0)."""
    sizes = instance.states_per_layer
    offset = np.concatenate([[0], np.cumsum(sizes)])
    acts = []
    for h in range(instance.H):
        a = np.zeros(int(offset[-1]), dtype=np.int64)
        a[offset[h] : offset[h + 1]] = policy.actions[h]
        acts.append(a)
    return DeterministicPolicy(tuple(acts))
