"""Finite-instantiation linear MDPs, policies, episode sampling and exact DP oracles.

Layers are exposed 1-based in every public argument named ``h``/``h_trunc``
(``h_trunc=H`` means "the whole episode"); arrays are indexed 0-based.
Each layer ``h`` owns its own finite state set, a shared action set of size
``num_actions`` and a feature tensor ``phi[h]`` of shape ``(S_h, A, d)``.
Transitions are ``P_h(.|s,a) = mu[h] @ phi[h][s, a]`` and rewards
``r_h(s,a) = <phi[h][s, a], theta[h]>``.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

SIMPLEX_TOL = 1e-9
NEG_TOL = 1e-12


class ConfigurationError(ValueError):
    """Raised when an instance, policy or parameter set is malformed."""


class NumericError(ArithmeticError):
    """Raised when a matrix that must be positive definite is not."""


@dataclass(frozen=True, eq=False)
class LinearMDP:
    d: int
    H: int
    num_actions: int
    phi: tuple[np.ndarray, ...]
    mu: tuple[np.ndarray, ...]
    theta: np.ndarray
    init: np.ndarray
    validate: bool = True
    P: tuple[np.ndarray, ...] = field(init=False, repr=False)
    cdf: tuple[np.ndarray, ...] = field(init=False, repr=False)
    reward: tuple[np.ndarray, ...] = field(init=False, repr=False)

    def __post_init__(self):
        phi = tuple(np.ascontiguousarray(p, dtype=np.float64) for p in self.phi)
        mu = tuple(np.ascontiguousarray(m, dtype=np.float64) for m in self.mu)
        theta = np.asarray(self.theta, dtype=np.float64).reshape(self.H, self.d)
        init = np.asarray(self.init, dtype=np.float64)
        object.__setattr__(self, "phi", phi)
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "theta", theta)
        object.__setattr__(self, "init", init)
        if len(phi) != self.H:
            raise ConfigurationError(f"expected {self.H} feature layers, got {len(phi)}")
        if len(mu) != self.H - 1:
            raise ConfigurationError(f"expected {self.H - 1} transition layers, got {len(mu)}")
        for h, p in enumerate(phi):
            if p.ndim != 3 or p.shape[1:] != (self.num_actions, self.d):
                raise ConfigurationError(f"phi[{h}] has shape {p.shape}")
        if init.shape != (phi[0].shape[0],):
            raise ConfigurationError("init must be a distribution over layer-1 states")
        if abs(init.sum() - 1.0) > SIMPLEX_TOL or (init < -NEG_TOL).any():
            raise ConfigurationError("init is not a probability vector")

        P, cdf = [], []
        for h, m in enumerate(mu):
            if m.shape != (phi[h + 1].shape[0], self.d):
                raise ConfigurationError(f"mu[{h}] has shape {m.shape}")
            p = np.einsum("sad,td->sat", phi[h], m)
            if (p < -NEG_TOL).any():
                raise ConfigurationError(f"negative transition probability at layer {h + 1}")
            p = np.clip(p, 0.0, None)
            sums = p.sum(axis=2)
            if np.abs(sums - 1.0).max() > SIMPLEX_TOL:
                raise ConfigurationError(f"transitions at layer {h + 1} do not sum to one")
            p = p / sums[..., None]
            p.setflags(write=False)
            P.append(p)
            c = np.cumsum(p, axis=2)
            c[..., -1] = 1.0
            cdf.append(c)
        reward = []
        for h in range(self.H):
            r = phi[h] @ theta[h]
            r.setflags(write=False)
            reward.append(r)
        object.__setattr__(self, "P", tuple(P))
        object.__setattr__(self, "cdf", tuple(cdf))
        object.__setattr__(self, "reward", tuple(reward))
        if self.validate:
            self.check_assumptions()

    @property
    def states_per_layer(self) -> list[int]:
        return [p.shape[0] for p in self.phi]

    @property
    def fixed_initial_state(self) -> int | None:
        nz = np.flatnonzero(self.init > 0)
        return int(nz[0]) if len(nz) == 1 else None

    def check_assumptions(self) -> None:
        """Raise ``ConfigurationError`` unless the linear-MDP norm and range bounds hold."""
        root_d = np.sqrt(self.d)
        for h in range(self.H):
            norms = np.linalg.norm(self.phi[h], axis=2)
            if norms.max() > 1.0 + SIMPLEX_TOL:
                raise ConfigurationError(f"feature norm {norms.max():.6g} > 1 at layer {h + 1}")
            r = self.reward[h]
            if r.min() < -SIMPLEX_TOL or r.max() > 1.0 + SIMPLEX_TOL:
                raise ConfigurationError(f"rewards outside [0, 1] at layer {h + 1}")
            if np.linalg.norm(self.theta[h]) > root_d + SIMPLEX_TOL:
                raise ConfigurationError(f"||theta_{h + 1}|| exceeds sqrt(d)")
        for h, m in enumerate(self.mu):
            if np.linalg.norm(m) > root_d + SIMPLEX_TOL:
                raise ConfigurationError(f"||mu_{h + 1}|| exceeds sqrt(d)")

    def rewards(self, reward: "RewardSpec | None" = None) -> tuple[np.ndarray, ...]:
        return self.reward if reward is None else reward.tables(self)

    def with_theta(self, theta) -> "LinearMDP":
        return LinearMDP(self.d, self.H, self.num_actions, self.phi, self.mu, theta, self.init)

    # serialization ---------------------------------------------------
    def to_dict(self) -> dict:
        return {
            "d": self.d,
            "H": self.H,
            "num_actions": self.num_actions,
            "states_per_layer": self.states_per_layer,
            "phi": [p.tolist() for p in self.phi],
            "mu": [m.tolist() for m in self.mu],
            "theta": self.theta.tolist(),
            "init": self.init.tolist(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "LinearMDP":
        missing = {"d", "H", "num_actions", "states_per_layer", "phi", "mu", "theta", "init"} - set(data)
        if missing:
            raise ConfigurationError(f"instance JSON missing fields {sorted(missing)}")
        inst = cls(
            d=int(data["d"]),
            H=int(data["H"]),
            num_actions=int(data["num_actions"]),
            phi=tuple(np.asarray(p, dtype=np.float64) for p in data["phi"]),
            mu=tuple(np.asarray(m, dtype=np.float64).reshape(-1, int(data["d"])) for m in data["mu"]),
            theta=np.asarray(data["theta"], dtype=np.float64),
            init=np.asarray(data["init"], dtype=np.float64),
        )
        if inst.states_per_layer != list(data["states_per_layer"]):
            raise ConfigurationError("states_per_layer disagrees with phi")
        return inst

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> "LinearMDP":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass(frozen=True)
class RewardSpec:
    """Alternative reward: per-layer ``theta`` vectors, or an explicit table per layer."""

    theta: np.ndarray | None = None
    table: tuple[np.ndarray, ...] | None = None

    def __post_init__(self):
        if (self.theta is None) == (self.table is None):
            raise ConfigurationError("RewardSpec needs exactly one of theta or table")

    @classmethod
    def zero(cls, instance: LinearMDP) -> "RewardSpec":
        return cls(theta=np.zeros((instance.H, instance.d)))

    def tables(self, instance: LinearMDP) -> tuple[np.ndarray, ...]:
        if self.theta is not None:
            theta = np.asarray(self.theta, dtype=np.float64).reshape(instance.H, instance.d)
            if np.linalg.norm(theta, axis=1).max() > np.sqrt(instance.d) + SIMPLEX_TOL:
                raise ConfigurationError("reward theta exceeds sqrt(d)")
            out = tuple(instance.phi[h] @ theta[h] for h in range(instance.H))
        else:
            out = tuple(np.asarray(t, dtype=np.float64) for t in self.table)
            if len(out) != instance.H or any(
                t.shape != (instance.states_per_layer[h], instance.num_actions) for h, t in enumerate(out)
            ):
                raise ConfigurationError("reward table shape mismatch")
        for t in out:
            if t.min() < -SIMPLEX_TOL or t.max() > 1.0 + SIMPLEX_TOL:
                raise ConfigurationError("rewards must lie in [0, 1]")
        return out


# policies ---------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class DeterministicPolicy:
    """Deterministic Markov policy: ``actions[h][s]`` for every layer and state."""

    actions: tuple[np.ndarray, ...]

    def __post_init__(self):
        acts = []
        for a in self.actions:
            a = np.array(a, dtype=np.int64)
            a.setflags(write=False)
            acts.append(a)
        object.__setattr__(self, "actions", tuple(acts))

    def __eq__(self, other):
        if not isinstance(other, DeterministicPolicy) or len(self.actions) != len(other.actions):
            return NotImplemented
        return all(np.array_equal(a, b) for a, b in zip(self.actions, other.actions))

    def __hash__(self):
        return hash(tuple(a.tobytes() for a in self.actions))

    @classmethod
    def constant(cls, instance: LinearMDP, action: int = 0) -> "DeterministicPolicy":
        return cls(tuple(np.full(n, action) for n in instance.states_per_layer))

    @classmethod
    def random(cls, instance: LinearMDP, rng: np.random.Generator) -> "DeterministicPolicy":
        return cls(tuple(rng.integers(instance.num_actions, size=n) for n in instance.states_per_layer))

    def to_list(self) -> list[list[int]]:
        return [a.tolist() for a in self.actions]


@dataclass(frozen=True, eq=False)
class MixturePolicy:
    """Uniform mixture over deterministic policies; one member is drawn per episode."""

    members: tuple[DeterministicPolicy, ...]

    def __post_init__(self):
        if not self.members:
            raise ConfigurationError("a mixture needs at least one member")
        object.__setattr__(self, "members", tuple(self.members))


Policy = DeterministicPolicy | MixturePolicy


def check_policy(instance: LinearMDP, policy: Policy) -> None:
    members = policy.members if isinstance(policy, MixturePolicy) else (policy,)
    for pi in members:
        if len(pi.actions) != instance.H:
            raise ConfigurationError("policy does not cover every layer")
        for h, a in enumerate(pi.actions):
            if a.shape != (instance.states_per_layer[h],):
                raise ConfigurationError(f"policy misses states at layer {h + 1}")
            if a.size and (a.min() < 0 or a.max() >= instance.num_actions):
                raise ConfigurationError(f"invalid action at layer {h + 1}")


# sampling ---------------------------------------------------------------


@dataclass(frozen=True)
class Trajectory:
    """One episode as parallel arrays indexed by layer ``0..H-1``.

    ``next_states[H-1]`` is ``-1`` (the episode ends)."""

    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray

    @property
    def steps(self) -> list[tuple[int, int, int, float, int]]:
        return [
            (h + 1, int(s), int(a), float(r), int(n))
            for h, (s, a, r, n) in enumerate(zip(self.states, self.actions, self.rewards, self.next_states))
        ]


@dataclass(frozen=True)
class EpisodeBatch:
    """``n`` episodes stored layer-major: ``states[h, i]`` is the layer-(h+1) state of episode ``i``."""

    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray

    @property
    def n(self) -> int:
        return self.states.shape[1]

    def trajectory(self, i: int) -> Trajectory:
        nxt = np.append(self.states[1:, i], -1)
        return Trajectory(self.states[:, i].copy(), self.actions[:, i].copy(), self.rewards[:, i].copy(), nxt)


def stream(seed: int, *key: int) -> np.random.Generator:
    """Counter-addressed random stream: the same ``(seed, key)`` always gives the same draws."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=tuple(int(k) for k in key)))


def _draw(cdf_rows: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    u = rng.random(cdf_rows.shape[0])
    return (cdf_rows < u[:, None]).sum(axis=1)


def sample_episodes(
    instance: LinearMDP,
    policy: Policy,
    n: int,
    rng: np.random.Generator,
    reward: RewardSpec | None = None,
    uniform_after: int | None = None,
) -> EpisodeBatch:
    """Sample ``n`` episodes; layers beyond ``uniform_after`` (1-based count) take uniform actions."""
    check_policy(instance, policy)
    H = instance.H
    rewards = instance.rewards(reward)
    states = np.empty((H, n), dtype=np.int64)
    actions = np.empty((H, n), dtype=np.int64)
    rew = np.empty((H, n))
    if isinstance(policy, MixturePolicy):
        member = rng.integers(len(policy.members), size=n)
        tables = [np.stack([m.actions[h] for m in policy.members]) for h in range(H)]
    s = _draw(np.broadcast_to(np.cumsum(instance.init), (n, instance.init.size)), rng)
    for h in range(H):
        states[h] = s
        if uniform_after is not None and h >= uniform_after:
            a = rng.integers(instance.num_actions, size=n)
        elif isinstance(policy, MixturePolicy):
            a = tables[h][member, s]
        else:
            a = policy.actions[h][s]
        actions[h] = a
        rew[h] = rewards[h][s, a]
        if h < H - 1:
            s = _draw(instance.cdf[h][s, a], rng)
    return EpisodeBatch(states, actions, rew)


def sample_episode(
    instance: LinearMDP, policy: Policy, rng: np.random.Generator, reward: RewardSpec | None = None
) -> Trajectory:
    return sample_episodes(instance, policy, 1, rng, reward).trajectory(0)


# exact dynamic programming ----------------------------------------------


def _members(policy: Policy) -> tuple[DeterministicPolicy, ...]:
    return policy.members if isinstance(policy, MixturePolicy) else (policy,)


def occupancy(instance: LinearMDP, policy: DeterministicPolicy, h_trunc: int | None = None) -> list[np.ndarray]:
    """State distributions ``d_h`` for layers ``1..h_trunc`` under a deterministic policy."""
    h_trunc = instance.H if h_trunc is None else h_trunc
    dist = [instance.init.copy()]
    for h in range(h_trunc - 1):
        a = policy.actions[h]
        rows = instance.P[h][np.arange(len(a)), a]
        dist.append(dist[-1] @ rows)
    return dist


def _check_trunc(instance: LinearMDP, h_trunc: int | None) -> int:
    h_trunc = instance.H if h_trunc is None else int(h_trunc)
    if not 1 <= h_trunc <= instance.H:
        raise ConfigurationError(f"h_trunc must lie in [1, {instance.H}]")
    return h_trunc


def evaluate_policy_exact(
    instance: LinearMDP, policy: Policy, reward: RewardSpec | None = None, h_trunc: int | None = None
) -> float:
    """Exact expected return over layers ``1..h_trunc``; mixtures average their members."""
    h_trunc = _check_trunc(instance, h_trunc)
    check_policy(instance, policy)
    rewards = instance.rewards(reward)
    values = []
    for pi in _members(policy):
        v = None
        for h in reversed(range(h_trunc)):
            a = pi.actions[h]
            idx = np.arange(len(a))
            q = rewards[h][idx, a]
            if v is not None:
                # same contraction as the optimal backup, so optimal values agree bit for bit
                q = q + (instance.P[h] @ v)[idx, a]
            v = q
        values.append(float(instance.init @ v))
    return float(np.mean(values))


def optimal_q_tables(
    instance: LinearMDP, reward: RewardSpec | None = None, h_trunc: int | None = None, step_rewards=None
) -> list[np.ndarray]:
    """Backward induction; returns ``Q*_h`` for ``h=1..h_trunc``."""
    h_trunc = _check_trunc(instance, h_trunc)
    rewards = instance.rewards(reward) if step_rewards is None else step_rewards
    qs: list[np.ndarray] = [None] * h_trunc
    v = None
    for h in reversed(range(h_trunc)):
        q = np.array(rewards[h], dtype=np.float64)
        if v is not None:
            q = q + instance.P[h] @ v
        qs[h] = q
        v = q.max(axis=1)
    return qs


def greedy_policy(instance: LinearMDP, qs: Sequence[np.ndarray]) -> DeterministicPolicy:
    """Greedy actions (lowest index on ties); layers without a Q table take action 0."""
    acts = [np.argmax(q, axis=1) for q in qs]
    acts += [np.zeros(n, dtype=np.int64) for n in instance.states_per_layer[len(acts):]]
    return DeterministicPolicy(tuple(acts))


def optimal_value_exact(
    instance: LinearMDP, reward: RewardSpec | None = None, h_trunc: int | None = None
) -> tuple[float, DeterministicPolicy]:
    qs = optimal_q_tables(instance, reward, h_trunc)
    return float(instance.init @ qs[0].max(axis=1)), greedy_policy(instance, qs)


def expected_covariance(instance: LinearMDP, policy: Policy, h: int) -> np.ndarray:
    """Exact ``E_pi[phi(s_h,a_h) phi(s_h,a_h)^T]`` at 1-based layer ``h``."""
    _check_trunc(instance, h)
    check_policy(instance, policy)
    members = _members(policy)
    out = np.zeros((instance.d, instance.d))
    for pi in members:
        dist = occupancy(instance, pi, h)[-1]
        f = instance.phi[h - 1][np.arange(len(dist)), pi.actions[h - 1]]
        out += (f * dist[:, None]).T @ f
    out /= len(members)
    return (out + out.T) / 2


def bonus_norms(instance: LinearMDP, h: int, inv: np.ndarray) -> np.ndarray:
    """``sqrt(phi^T inv phi)`` for every (s, a) at 1-based layer ``h``."""
    f = instance.phi[h - 1]
    quad = np.einsum("sad,de,sae->sa", f, inv, f)
    return np.sqrt(np.clip(quad, 0.0, None))


def uncertainty_diagnostic(instance: LinearMDP, sigmas: Sequence[np.ndarray], h_max: int) -> float:
    """``max_pi E_pi[sum_{h<=h_max} ||phi_h||_{Sigma_h^{-1}}]`` by backward DP."""
    h_max = _check_trunc(instance, h_max)
    if len(sigmas) < h_max:
        raise ConfigurationError("need one matrix per layer up to h_max")
    step = []
    for h in range(h_max):
        s = np.asarray(sigmas[h], dtype=np.float64)
        try:
            chol = np.linalg.cholesky((s + s.T) / 2)
        except np.linalg.LinAlgError as exc:
            raise NumericError(f"Sigma_{h + 1} is not positive definite") from exc
        inv = np.linalg.inv(chol)
        step.append(bonus_norms(instance, h + 1, inv.T @ inv))
    qs = optimal_q_tables(instance, h_trunc=h_max, step_rewards=step)
    return float(instance.init @ qs[0].max(axis=1))


# policy enumeration -----------------------------------------------------


def _action_classes(instance: LinearMDP, h: int, s: int) -> list[int]:
    """One representative action per distinct (features, transition) row."""
    seen, reps = set(), []
    for a in range(instance.num_actions):
        key = instance.phi[h][s, a].tobytes()
        if h < instance.H - 1:
            key += instance.P[h][s, a].tobytes()
        if key not in seen:
            seen.add(key)
            reps.append(a)
    return reps


def enumerate_policies(
    instance: LinearMDP, h_trunc: int | None = None, limit: int = 10**5
) -> Iterator[DeterministicPolicy]:
    """Yield every behaviourally distinct deterministic Markov policy on layers ``1..h_trunc``.

    Unreachable states and actions with identical features and transitions are
    collapsed to their lowest index, so two yielded policies always differ on
    some reachable state.  Raises ``ConfigurationError`` past ``limit``.
    """
    h_trunc = _check_trunc(instance, h_trunc)
    sizes = instance.states_per_layer
    count = 0

    def rec(h: int, dist: np.ndarray, prefix: list[np.ndarray]):
        nonlocal count
        if h == h_trunc:
            count += 1
            if count > limit:
                raise ConfigurationError(f"more than {limit} deterministic policies")
            rest = [np.zeros(n, dtype=np.int64) for n in sizes[h_trunc:]]
            yield DeterministicPolicy(tuple(prefix + rest))
            return
        reach = np.flatnonzero(dist > 0)
        choices = [_action_classes(instance, h, int(s)) for s in reach]
        for combo in itertools.product(*choices):
            a = np.zeros(sizes[h], dtype=np.int64)
            a[reach] = combo
            nxt = dist @ instance.P[h][np.arange(sizes[h]), a] if h < instance.H - 1 else None
            yield from rec(h + 1, nxt, prefix + [a])

    yield from rec(0, instance.init, [])


def count_policies(instance: LinearMDP, h_trunc: int | None = None, limit: int = 10**5) -> int:
    return sum(1 for _ in enumerate_policies(instance, h_trunc, limit))


# generators -------------------------------------------------------------


def random_linear_mdp(
    rng: np.random.Generator,
    d: int,
    H: int,
    states: int | Sequence[int],
    num_actions: int,
    concentration: float = 0.3,
    fixed_init: bool = True,
) -> LinearMDP:
    """Random linear MDP with simplex features, distribution-valued ``mu`` columns and ``theta`` in ``[0,1]^d``.

    Smaller ``concentration`` pushes features toward the simplex vertices
    (better-conditioned covariances)."""
    sizes = [states] * H if isinstance(states, int) else list(states)
    phi = tuple(rng.dirichlet(np.full(d, concentration), size=(n, num_actions)) for n in sizes)
    mu = tuple(rng.dirichlet(np.full(sizes[h + 1], 0.5), size=d).T for h in range(H - 1))
    theta = rng.uniform(0.0, 1.0, size=(H, d))
    if fixed_init:
        init = np.zeros(sizes[0])
        init[0] = 1.0
    else:
        init = rng.dirichlet(np.ones(sizes[0]))
    return LinearMDP(d, H, num_actions, phi, mu, theta, init)


def chain_mdp(d: int, H: int, feature: Sequence[float] | None = None, theta=None) -> LinearMDP:
    """Single-state, single-action chain with a constant feature."""
    f = np.zeros(d) if feature is None else np.asarray(feature, dtype=np.float64)
    phi = tuple(np.broadcast_to(f, (1, 1, d)).copy() for _ in range(H))
    # mu must map f to total mass 1: put all mass along f / ||f||^2
    norm2 = float(f @ f)
    if H > 1 and norm2 == 0.0:
        raise ConfigurationError("a zero feature cannot carry transition mass")
    mu = tuple((f / norm2)[None, :] for _ in range(H - 1))
    theta = np.zeros((H, d)) if theta is None else theta
    return LinearMDP(d, H, 1, phi, mu, theta, np.ones(1))


def bandit_mdp(d: int) -> LinearMDP:
    """One state, ``d`` arms, one-hot features, horizon 1."""
    phi = (np.eye(d)[None, :, :],)
    return LinearMDP(d, 1, d, phi, (), np.full((1, d), 0.5), np.ones(1))


def action_indexed_mdp(rng: np.random.Generator, d: int, H: int, states: int = 3) -> LinearMDP:
    """``phi(s, a) = e_a`` with ``d`` actions: the action alone sets the next-state law.

    Every layer has reachability ``1/sqrt(d)``, which makes this the
    reference instance for mixture-policy covers at larger ``d``."""
    sizes = [1] + [states] * (H - 1)
    phi = tuple(np.broadcast_to(np.eye(d), (n, d, d)).copy() for n in sizes)
    mu = tuple(rng.dirichlet(np.ones(sizes[h + 1]), size=d).T for h in range(H - 1))
    return LinearMDP(d, H, d, phi, mu, rng.uniform(0.0, 1.0, size=(H, d)), np.ones(1))
