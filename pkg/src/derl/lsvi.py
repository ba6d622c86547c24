"""Least-squares value iteration pieces shared by every deployment algorithm."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .mdp import ConfigurationError, DeterministicPolicy, LinearMDP, NumericError, RewardSpec, bonus_norms

REINVERT_EVERY = 4096


class CovarianceAccumulator:
    """Regularized Gram matrix ``lambda I + sum phi phi^T`` with its inverse and log-determinant."""

    def __init__(self, d: int, lambda_reg: float = 1.0):
        if lambda_reg <= 0:
            raise ConfigurationError("lambda_reg must be positive")
        self.d = d
        self.lambda_reg = float(lambda_reg)
        self.gram = lambda_reg * np.eye(d)
        self.inverse = np.eye(d) / lambda_reg
        self.logdet = d * np.log(lambda_reg)
        self.count = 0
        self._since_reinvert = 0

    def copy(self) -> "CovarianceAccumulator":
        out = CovarianceAccumulator.__new__(CovarianceAccumulator)
        out.__dict__.update({k: (v.copy() if isinstance(v, np.ndarray) else v) for k, v in self.__dict__.items()})
        return out

    def absorb(self, phi) -> "CovarianceAccumulator":
        """Rank-one update by Sherman-Morrison."""
        phi = np.asarray(phi, dtype=np.float64)
        if np.linalg.norm(phi) > 1.0 + 1e-9:
            raise ConfigurationError("feature norm exceeds 1")
        self.count += 1
        if not phi.any():
            return self
        v = self.inverse @ phi
        denom = 1.0 + phi @ v
        if denom <= 0:
            raise NumericError("rank-one denominator is not positive")
        self.gram += np.outer(phi, phi)
        self.inverse -= np.outer(v, v) / denom
        self.logdet += np.log(denom)
        self._since_reinvert += 1
        if self._since_reinvert >= REINVERT_EVERY:
            self._refresh()
        return self

    def absorb_batch(self, phis: np.ndarray, weights: np.ndarray | None = None) -> "CovarianceAccumulator":
        """Add ``sum_i w_i phi_i phi_i^T`` at once, then re-invert densely."""
        phis = np.asarray(phis, dtype=np.float64).reshape(-1, self.d)
        w = np.ones(len(phis)) if weights is None else np.asarray(weights, dtype=np.float64)
        self.gram += (phis * w[:, None]).T @ phis
        self.count += int(round(w.sum()))
        self._refresh()
        return self

    def merge(self, other: "CovarianceAccumulator") -> "CovarianceAccumulator":
        self.gram += other.gram - other.lambda_reg * np.eye(self.d)
        self.count += other.count
        self._refresh()
        return self

    def _refresh(self) -> None:
        self.gram = (self.gram + self.gram.T) / 2
        chol = np.linalg.cholesky(self.gram)
        inv_chol = np.linalg.inv(chol)
        self.inverse = inv_chol.T @ inv_chol
        self.logdet = 2.0 * np.log(np.diag(chol)).sum()
        self._since_reinvert = 0

    def quad(self, phi: np.ndarray) -> np.ndarray:
        """``phi^T Lambda^{-1} phi`` along the last axis."""
        return np.clip(np.einsum("...d,de,...e->...", phi, self.inverse, phi), 0.0, None)


def bonus(acc: CovarianceAccumulator, phi, beta: float, ceiling: float):
    return np.minimum(beta * np.sqrt(acc.quad(np.asarray(phi, dtype=np.float64))), ceiling)


def ridge_fit(acc: CovarianceAccumulator, dataset: Sequence[tuple[np.ndarray, float]]) -> np.ndarray:
    """``Lambda^{-1} sum phi * target``; ``acc`` must have absorbed exactly the dataset's features."""
    if acc.count != len(dataset):
        raise ConfigurationError(f"accumulator holds {acc.count} vectors but dataset has {len(dataset)}")
    if not dataset:
        return np.zeros(acc.d)
    phis = np.array([p for p, _ in dataset], dtype=np.float64)
    y = np.array([t for _, t in dataset], dtype=np.float64)
    return acc.inverse @ (phis.T @ y)


@dataclass
class LayerData:
    """Sufficient statistics of the transitions logged at one layer.

    ``counts[s, a, s']`` counts observed transitions (the last layer keeps a
    zero-width next-state axis, so only ``visits`` is meaningful there)."""

    counts: np.ndarray
    visits: np.ndarray = field(init=False)

    def __post_init__(self):
        self.visits = self.counts.sum(axis=2) if self.counts.shape[2] else np.zeros(self.counts.shape[:2])

    @classmethod
    def empty(cls, instance: LinearMDP, h: int) -> "LayerData":
        n_next = instance.states_per_layer[h] if h < instance.H else 0
        out = cls(np.zeros((instance.states_per_layer[h - 1], instance.num_actions, n_next)))
        return out

    def add(self, states: np.ndarray, actions: np.ndarray, next_states: np.ndarray | None) -> None:
        if next_states is None:
            np.add.at(self.visits, (states, actions), 1.0)
        else:
            np.add.at(self.counts, (states, actions, next_states), 1.0)
            np.add.at(self.visits, (states, actions), 1.0)

    @property
    def n(self) -> int:
        return int(self.visits.sum())

    def gram(self, phi: np.ndarray) -> np.ndarray:
        f = phi.reshape(-1, phi.shape[-1])
        return (f * self.visits.reshape(-1, 1)).T @ f

    def accumulator(self, phi: np.ndarray, lambda_reg: float = 1.0) -> CovarianceAccumulator:
        acc = CovarianceAccumulator(phi.shape[-1], lambda_reg)
        acc.gram += self.gram(phi)
        acc.count = self.n
        acc._refresh()
        return acc

    def regress(self, acc: CovarianceAccumulator, phi: np.ndarray, v_next: np.ndarray) -> np.ndarray:
        """Ridge weights for targets ``V(s')``; ``v_next`` may carry trailing batch axes."""
        target = np.tensordot(self.counts, v_next, axes=([2], [0]))  # (S, A, ...)
        f = phi.reshape(-1, phi.shape[-1])
        rhs = f.T @ target.reshape(f.shape[0], -1)
        return (acc.inverse @ rhs).reshape((phi.shape[-1],) + v_next.shape[1:])


@dataclass
class LinearQ:
    """Clipped linear-plus-bonus Q-functions for layers ``1..len(w)``."""

    w: list[np.ndarray]
    bonus_matrix: list[np.ndarray]
    beta: float
    clip_ceiling: float
    q: list[np.ndarray]

    @property
    def values(self) -> list[np.ndarray]:
        return [q.max(axis=1) for q in self.q]

    def initial_value(self, instance: LinearMDP) -> float:
        return float(instance.init @ self.q[0].max(axis=1))


RewardFn = Callable[[int, np.ndarray], np.ndarray]


def lsvi_backup(
    instance: LinearMDP,
    data: Sequence[LayerData],
    accs: Sequence[CovarianceAccumulator],
    h_top: int,
    beta: float,
    ceiling: float,
    reward: RewardSpec | RewardFn | None = None,
    bonus_ceiling: float | None = None,
) -> tuple[LinearQ, DeterministicPolicy]:
    """Optimistic backward pass over layers ``h_top..1`` with ``V_{h_top+1} = 0``.

    ``reward`` is a ``RewardSpec`` (``None`` means the instance's own reward) or
    a callable ``(h, bonus_table) -> reward_table`` for bonus-derived rewards.
    ``Q_h = min(w_h^T phi + r_h + u_h, ceiling)`` with
    ``u_h = min(beta ||phi||_{Lambda_h^{-1}}, bonus_ceiling)``.
    """
    bonus_ceiling = ceiling if bonus_ceiling is None else bonus_ceiling
    tables = None if callable(reward) else instance.rewards(reward)
    q: list[np.ndarray] = [None] * h_top
    ws: list[np.ndarray] = [None] * h_top
    mats: list[np.ndarray] = [None] * h_top
    v_next = None
    for h in range(h_top, 0, -1):
        acc = accs[h - 1]
        phi = instance.phi[h - 1]
        u = np.minimum(beta * bonus_norms(instance, h, acc.inverse), bonus_ceiling)
        r = reward(h, u) if callable(reward) else tables[h - 1]
        if v_next is None:
            w = np.zeros(instance.d)
        else:
            w = data[h - 1].regress(acc, phi, v_next)
        qh = np.minimum(phi @ w + r + u, ceiling)
        q[h - 1], ws[h - 1], mats[h - 1] = qh, w, beta**2 * acc.inverse
        v_next = qh.max(axis=1)
    policy = DeterministicPolicy(
        tuple(np.argmax(qh, axis=1) for qh in q)
        + tuple(np.zeros(n, dtype=np.int64) for n in instance.states_per_layer[h_top:])
    )
    return LinearQ(ws, mats, beta, ceiling, q), policy


def theoretical_beta(d: int, H: int, delta: float, epsilon: float, c_beta: float = 0.5) -> float:
    """``c_beta * d * H * sqrt(log(d H / (delta epsilon)))``."""
    return c_beta * d * H * np.sqrt(np.log(d * H / (delta * epsilon)))
