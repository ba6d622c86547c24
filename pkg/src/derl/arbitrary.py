"""Deployment with mixture policies: covariance estimation by policy evaluation,
discretized optimistic planning, per-layer policy covers and the reachability oracle."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.optimize import minimize

from .deterministic import RewardFreeDataset
from .lsvi import CovarianceAccumulator, LayerData
from .mdp import (
    ConfigurationError,
    DeterministicPolicy,
    LinearMDP,
    MixturePolicy,
    NumericError,
    bonus_norms,
    enumerate_policies,
    expected_covariance,
    sample_episodes,
    stream,
)

logger = logging.getLogger(__name__)

PSD_TOL = 1e-12


class ConstraintError(NumericError):
    """A discretized bonus matrix left the PSD cone (or exceeded the identity at the top layer)."""


class EstimationError(RuntimeError):
    pass


# discretization ---------------------------------------------------------


def grid_indices(x, eps0: float) -> np.ndarray:
    """Integer ``ceil(x / eps0)``, snapping ratios within 1e-9 of an integer first."""
    if eps0 <= 0:
        raise ConfigurationError("eps0 must be positive")
    q = np.asarray(x, dtype=np.float64) / eps0
    r = np.round(q)
    q = np.where(np.abs(q - r) <= 1e-9 * np.maximum(1.0, np.abs(r)), r, q)
    return np.ceil(q).astype(np.int64)


def discretize_vector(w, eps0: float) -> np.ndarray:
    return grid_indices(w, eps0) * eps0


def discretize_matrix(S, eps0: float) -> np.ndarray:
    S = np.asarray(S, dtype=np.float64)
    if S.ndim != 2:
        raise ConfigurationError("expected a matrix")
    return grid_indices(S, eps0) * eps0


@dataclass(frozen=True, eq=False)
class DiscretizedQ:
    """Grid-valued weights and bonus matrices for layers ``1..h`` (stored as integers).

    ``w_idx[h]`` is ``None`` at the top layer, whose Q-function is pure bonus."""

    w_idx: tuple[np.ndarray | None, ...]
    z_idx: tuple[np.ndarray, ...]
    w_grid: float
    z_grid: float

    def weights(self, h: int) -> np.ndarray | None:
        w = self.w_idx[h - 1]
        return None if w is None else w * self.w_grid

    def matrix(self, h: int) -> np.ndarray:
        return self.z_idx[h - 1] * self.z_grid

    def q_tables(self, instance: LinearMDP) -> list[np.ndarray]:
        out = []
        for h in range(1, len(self.z_idx) + 1):
            phi = instance.phi[h - 1]
            u = np.sqrt(np.clip(np.einsum("sad,de,sae->sa", phi, self.matrix(h), phi), 0.0, None))
            w = self.weights(h)
            out.append(u if w is None else np.minimum(phi @ w + u, 1.0))
        return out

    def policy(self, instance: LinearMDP) -> DeterministicPolicy:
        acts = [np.argmax(q, axis=1) for q in self.q_tables(instance)]
        acts += [np.zeros(n, dtype=np.int64) for n in instance.states_per_layer[len(acts):]]
        return DeterministicPolicy(tuple(acts))

    def to_dict(self) -> dict:
        return {
            "w_grid": self.w_grid,
            "z_grid": self.z_grid,
            "w_idx": [None if w is None else w.tolist() for w in self.w_idx],
            "z_idx": [z.tolist() for z in self.z_idx],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "DiscretizedQ":
        return cls(
            tuple(None if w is None else np.asarray(w, dtype=np.int64) for w in data["w_idx"]),
            tuple(np.asarray(z, dtype=np.int64) for z in data["z_idx"]),
            float(data["w_grid"]),
            float(data["z_grid"]),
        )


def _check_psd(Z: np.ndarray, upper_identity: bool = False) -> None:
    eig = np.linalg.eigvalsh((Z + Z.T) / 2)
    if eig[0] < -PSD_TOL:
        raise ConstraintError(f"discretized matrix has eigenvalue {eig[0]:.3g} < 0")
    if upper_identity and eig[-1] > 1.0 + PSD_TOL:
        raise ConstraintError(f"discretized top-layer matrix has eigenvalue {eig[-1]:.3g} > 1")


# covariance estimation and optimistic planning --------------------------


def _initial_value(instance: LinearMDP, v: np.ndarray) -> np.ndarray:
    return np.tensordot(instance.init, v, axes=([0], [0]))


def _pair_rewards(instance: LinearMDP, h: int, policy: DeterministicPolicy) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    d = instance.d
    iu, ju = np.triu_indices(d)
    a = policy.actions[h - 1]
    f = instance.phi[h - 1][np.arange(len(a)), a]
    return (1.0 + f[:, iu] * f[:, ju]) / 2.0, iu, ju


def estimate_cov_matrix(
    instance: LinearMDP,
    h: int,
    layers: Sequence[LayerData],
    accs: Sequence[CovarianceAccumulator],
    policy: DeterministicPolicy,
) -> np.ndarray:
    """Estimate ``E_pi[phi_h phi_h^T]`` entrywise by evaluating ``pi`` on the shifted rewards ``(1 + phi_i phi_j) / 2``.

    All ``d(d+1)/2`` evaluations run together; every backed-up Q is clipped to
    ``[0, 1]`` so the returned entries lie in ``[-1, 1]``."""
    for g in range(1, h):
        if layers[g - 1].n == 0:
            raise EstimationError(f"no data at layer {g}")
    v, iu, ju = _pair_rewards(instance, h, policy)
    for g in range(h - 1, 0, -1):
        phi = instance.phi[g - 1]
        w = layers[g - 1].regress(accs[g - 1], phi, v)  # (d, P)
        a = policy.actions[g - 1]
        f = phi[np.arange(len(a)), a]
        v = np.clip(f @ w, 0.0, 1.0)
    tilde = np.empty((instance.d, instance.d))
    vals = np.clip(_initial_value(instance, v), 0.0, 1.0)
    tilde[iu, ju] = vals
    tilde[ju, iu] = vals
    return 2.0 * tilde - 1.0


def solve_opt_q(
    instance: LinearMDP,
    h: int,
    layers: Sequence[LayerData],
    accs: Sequence[CovarianceAccumulator],
    beta_prime: float,
    sigma_R: np.ndarray,
    eps0: float,
) -> tuple[float, DeterministicPolicy, DiscretizedQ]:
    """Optimistic planning toward the top-layer reward ``||phi||_{(2I + sigma_R)^{-1}}``.

    Returns ``V_1`` of the exact chain together with the greedy policy of the
    discretized chain (and the discretized Q-function that defines it)."""
    d = instance.d
    sigma_R = np.asarray(sigma_R, dtype=np.float64)
    if np.linalg.eigvalsh((sigma_R + sigma_R.T) / 2)[0] < -0.5 - 1e-12:
        raise ConfigurationError("sigma_R must satisfy sigma_R >= -I/2")
    if eps0 <= 0:
        raise ConfigurationError("eps0 must be positive")
    w_grid, z_grid = eps0 / (2 * d), eps0**2 / (4 * d)

    top = np.linalg.inv(2.0 * np.eye(d) + sigma_R)
    top = (top + top.T) / 2
    z_top = grid_indices(top, z_grid)
    _check_psd(z_top * z_grid, upper_identity=True)
    v = bonus_norms(instance, h, top).max(axis=1)
    q_bar = [None] * h
    q_bar[h - 1] = bonus_norms(instance, h, z_top * z_grid)
    w_idx: list[np.ndarray | None] = [None] * h
    z_idx: list[np.ndarray] = [None] * h
    z_idx[h - 1] = z_top

    for g in range(h - 1, 0, -1):
        if layers[g - 1].n == 0:
            raise EstimationError(f"no data at layer {g}")
        acc = accs[g - 1]
        phi = instance.phi[g - 1]
        w = layers[g - 1].regress(acc, phi, v)
        u = beta_prime * bonus_norms(instance, g, acc.inverse)
        v = np.minimum(phi @ w + u, 1.0).max(axis=1)
        w_idx[g - 1] = grid_indices(w, w_grid)
        z = grid_indices(beta_prime**2 * (acc.inverse + acc.inverse.T) / 2, z_grid)
        _check_psd(z * z_grid)
        z_idx[g - 1] = z
        q_bar[g - 1] = np.minimum(phi @ (w_idx[g - 1] * w_grid) + bonus_norms(instance, g, z * z_grid), 1.0)

    dq = DiscretizedQ(tuple(w_idx), tuple(z_idx), w_grid, z_grid)
    acts = [np.argmax(q, axis=1) for q in q_bar]
    acts += [np.zeros(n, dtype=np.int64) for n in instance.states_per_layer[h:]]
    return float(_initial_value(instance, v)), DeterministicPolicy(tuple(acts)), dq


# main loop --------------------------------------------------------------


@dataclass
class PolicyCover:
    h: int
    members: list[DeterministicPolicy] = field(default_factory=list)
    discretized: list[DiscretizedQ] = field(default_factory=list)
    sigma_tilde: list[np.ndarray] = field(default_factory=list)
    estimates: list[np.ndarray] = field(default_factory=list)
    values: list[float] = field(default_factory=list)
    broke: bool = False
    fallback: bool = False

    @property
    def iterations(self) -> int:
        return len(self.values)

    def mixture(self) -> MixturePolicy:
        return MixturePolicy(tuple(self.members))

    def to_dict(self) -> dict:
        return {
            "h": self.h,
            "members": [m.to_list() for m in self.members],
            "discretized": [q.to_dict() for q in self.discretized],
            "sigma_tilde": [s.tolist() for s in self.sigma_tilde],
            "estimates": [s.tolist() for s in self.estimates],
            "values": self.values,
            "broke": self.broke,
            "fallback": self.fallback,
        }


def save_covers(covers: Sequence[PolicyCover], path) -> None:
    with open(path, "w") as fh:
        json.dump([c.to_dict() for c in covers], fh)


@dataclass(frozen=True)
class ArbitraryParams:
    """Desk-scale knobs; ``theory`` fills them from the asymptotic choices with explicit constants."""

    i_max: int
    eps0: float
    beta_prime: float
    nu_min: float
    N: int

    @classmethod
    def theory(cls, d: int, H: int, nu_min: float, N: int, epsilon: float = 0.1, delta: float = 0.1,
               c_i: float = 1.0, c_beta_prime: float = 0.05) -> "ArbitraryParams":
        i_max = max(1, int(np.ceil(c_i * d / nu_min**4 * np.log(d / nu_min))))
        beta_prime = c_beta_prime * d * np.sqrt(np.log(d * H / (epsilon * delta * nu_min)))
        return cls(i_max, 1.0 / N, beta_prime, nu_min, N)


def effective_eps0(eps0: float, d: int, N: int) -> float:
    """The stricter of the caller's value and ``1 / (2 d (N + 1))``."""
    return min(eps0, 1.0 / (2 * d * (N + 1)))


def run_arbitrary_derl(
    instance: LinearMDP,
    i_max: int,
    eps0: float,
    beta_prime: float,
    nu_min: float,
    N: int,
    seed: int = 0,
) -> tuple[RewardFreeDataset, list[PolicyCover]]:
    """Exactly ``H`` deployments, one per layer, each a uniform mixture over that layer's cover."""
    if instance.fixed_initial_state is None:
        raise ConfigurationError("mixture-policy deployment assumes a fixed initial state")
    if i_max < 1 or N < 1 or not 0 < nu_min <= 1:
        raise ConfigurationError("need i_max >= 1, N >= 1 and nu_min in (0, 1]")
    d, H = instance.d, instance.H
    eps0 = effective_eps0(eps0, d, N)
    threshold = 3.0 * nu_min**2 / 8.0
    dataset = RewardFreeDataset.empty(instance)
    accs: list[CovarianceAccumulator] = []
    covers: list[PolicyCover] = []
    for h in range(1, H + 1):
        cover = PolicyCover(h)
        initial = DeterministicPolicy.constant(instance)
        pi = initial
        sigma = 2.0 * np.eye(d)
        cover.sigma_tilde.append(sigma.copy())
        for _ in range(i_max):
            est = estimate_cov_matrix(instance, h, dataset.layers, accs, pi)
            sigma = sigma + est
            cover.estimates.append(est)
            cover.sigma_tilde.append(sigma.copy())
            value, pi, dq = solve_opt_q(instance, h, dataset.layers, accs, beta_prime, sigma - 2.0 * np.eye(d), eps0)
            cover.values.append(value)
            if value <= threshold:
                cover.broke = True
                break
            if pi not in cover.members:  # the cover is a set
                cover.members.append(pi)
                cover.discretized.append(dq)
        if not cover.broke:
            logger.warning("layer %d: i_max=%d reached without meeting the break rule", h, i_max)
        if not cover.members:
            cover.members.append(initial)
            cover.fallback = True
        batch = sample_episodes(instance, cover.mixture(), N, stream(seed, h), uniform_after=h)
        dataset.add_batch(batch, layers=[h])
        accs.append(dataset.layers[h - 1].accumulator(instance.phi[h - 1]))
        covers.append(cover)
    return dataset, covers


# reachability -----------------------------------------------------------


@dataclass(frozen=True)
class ReachabilityReport:
    nu_per_layer: tuple[float, ...]
    method: str

    @property
    def nu_min(self) -> float:
        return min(self.nu_per_layer)

    def to_dict(self) -> dict:
        return {"nu_per_layer": list(self.nu_per_layer), "nu_min": self.nu_min, "method": self.method}


def sphere_directions(d: int, rng: np.random.Generator | None = None) -> np.ndarray:
    """Unit directions covering a hemisphere: 4096 for ``d <= 3``, 32768 beyond."""
    if d == 1:
        return np.ones((1, 1))
    if d == 2:
        t = np.linspace(0.0, np.pi, 4096, endpoint=False)
        return np.column_stack([np.cos(t), np.sin(t)])
    if d == 3:
        n = 4096
        k = np.arange(n) + 0.5
        z = k / n  # upper hemisphere
        r = np.sqrt(1.0 - z**2)
        ang = np.pi * (1.0 + np.sqrt(5.0)) * k
        return np.column_stack([r * np.cos(ang), r * np.sin(ang), z])
    rng = np.random.default_rng(0) if rng is None else rng
    x = rng.standard_normal((32768, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def _layer_covariances(instance: LinearMDP, h: int, cap: int, rng: np.random.Generator) -> tuple[np.ndarray, bool]:
    try:
        mats = [expected_covariance(instance, p, h) for p in enumerate_policies(instance, h, limit=cap)]
        exact = True
    except ConfigurationError:
        mats = [expected_covariance(instance, DeterministicPolicy.random(instance, rng), h) for _ in range(cap)]
        exact = False
    uniq = np.unique(np.round(np.stack(mats), 14), axis=0)
    return uniq, exact


def minmax_quadratic(mats: np.ndarray, refine: int = 8) -> float:
    """``min_{||x||=1} max_i x^T M_i x`` by sphere discretization plus Nelder-Mead refinement."""
    d = mats.shape[1]
    dirs = sphere_directions(d)
    worst = np.full(len(dirs), -np.inf)
    for start in range(0, len(mats), 64):
        chunk = mats[start : start + 64]
        worst = np.maximum(worst, np.einsum("nd,pde,ne->np", dirs, chunk, dirs).max(axis=1))
    best = float(worst.min())
    if d == 1:
        return best

    def f(x):
        x = x / np.linalg.norm(x)
        return float(np.einsum("d,pde,e->p", x, mats, x).max())

    for i in np.argsort(worst)[:refine]:
        res = minimize(f, dirs[i], method="Nelder-Mead", options={"xatol": 1e-10, "fatol": 1e-12, "maxiter": 4000})
        best = min(best, float(res.fun))
    return best


def reachability_coefficient(
    instance: LinearMDP, method: str = "BruteForce", cap: int = 10**4, seed: int = 0
) -> ReachabilityReport:
    """Per-layer ``min_theta max_pi sqrt(E_pi[(phi^T theta)^2])``.

    ``BruteForce`` solves the min-max over enumerated deterministic policies;
    ``SvdLowerBound`` returns ``max_pi sqrt(lambda_min(E_pi[phi phi^T]))``.
    When a layer has more than ``cap`` policies only the SVD bound over
    ``cap`` random policies is available and the report says so."""
    if method not in ("BruteForce", "SvdLowerBound"):
        raise ConfigurationError(f"unknown method {method!r}")
    rng = np.random.default_rng(seed)
    nus, used = [], method
    for h in range(1, instance.H + 1):
        mats, exact = _layer_covariances(instance, h, cap, rng)
        if method == "BruteForce" and exact:
            nus.append(float(np.sqrt(max(minmax_quadratic(mats), 0.0))))
        else:
            used = "SvdLowerBound"
            lam = np.linalg.eigvalsh(mats)[:, 0]
            nus.append(float(np.sqrt(max(lam.max(), 0.0))))
    return ReachabilityReport(tuple(nus), used)
