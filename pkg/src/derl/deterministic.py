"""Layer-by-layer deployment with deterministic policies, reward-aware and reward-free."""

from __future__ import annotations

import csv
import io
import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .lsvi import LayerData, lsvi_backup
from .mdp import (
    ConfigurationError,
    DeterministicPolicy,
    EpisodeBatch,
    LinearMDP,
    RewardSpec,
    bonus_norms,
    evaluate_policy_exact,
    optimal_value_exact,
    sample_episodes,
    stream,
)

CSV_COLUMNS = ("k", "h_k", "delta_k", "frontier_advanced", "J_pi_exact", "J_opt_exact", "suboptimality")


class PlanningError(RuntimeError):
    pass


@dataclass
class DeploymentRecord:
    k: int
    h_k: int
    delta: float
    frontier_advanced: bool
    policy: DeterministicPolicy
    value_estimate: float
    n: int
    wall_time: float
    bonus_sum: float = 0.0


@dataclass
class DeploymentLog:
    records: list[DeploymentRecord] = field(default_factory=list)
    terminal: str = "BudgetExhausted"
    returned_k: int | None = None

    @property
    def num_deployments(self) -> int:
        return len(self.records)

    @property
    def returned(self) -> bool:
        return self.terminal == "ReturnedPolicy"

    def frontier_advances(self) -> list[DeploymentRecord]:
        """Deployments ``k_h`` after which layer ``h = h_k`` counted as explored."""
        return [r for r in self.records if r.frontier_advanced]

    def rows(self, instance: LinearMDP, reward: RewardSpec | None = None) -> list[dict]:
        rows = []
        for r in self.records:
            j_pi = evaluate_policy_exact(instance, r.policy, reward, h_trunc=r.h_k)
            j_opt = optimal_value_exact(instance, reward, h_trunc=r.h_k)[0]
            rows.append(
                {
                    "k": r.k,
                    "h_k": r.h_k,
                    "delta_k": r.delta,
                    "frontier_advanced": int(r.frontier_advanced),
                    "J_pi_exact": j_pi,
                    "J_opt_exact": j_opt,
                    "suboptimality": j_opt - j_pi,
                }
            )
        return rows

    def to_csv(self, instance: LinearMDP, reward: RewardSpec | None = None, path=None) -> str:
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for row in self.rows(instance, reward):
            writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
        text = buf.getvalue()
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text)
        return text


@dataclass
class RewardFreeDataset:
    """Per-layer transition logs (state, action, next state; ``-1`` past the last layer)."""

    layers: list[LayerData]
    transitions: list[list[np.ndarray]]

    @classmethod
    def empty(cls, instance: LinearMDP) -> "RewardFreeDataset":
        return cls([LayerData.empty(instance, h) for h in range(1, instance.H + 1)], [[] for _ in range(instance.H)])

    def add_layer(self, h: int, states: np.ndarray, actions: np.ndarray, next_states: np.ndarray | None) -> None:
        self.layers[h - 1].add(states, actions, next_states)
        nxt = np.full_like(states, -1) if next_states is None else next_states
        self.transitions[h - 1].append(np.stack([states, actions, nxt], axis=1))

    def add_batch(self, batch: EpisodeBatch, layers: Sequence[int] | None = None) -> None:
        H = batch.states.shape[0]
        for h in layers or range(1, H + 1):
            nxt = batch.states[h] if h < H else None
            self.add_layer(h, batch.states[h - 1], batch.actions[h - 1], nxt)

    def size(self, h: int) -> int:
        return sum(len(c) for c in self.transitions[h - 1])

    def tuples(self, h: int, instance: LinearMDP, reward: RewardSpec | None = None) -> np.ndarray:
        """Rows ``(s, a, r, s')`` for layer ``h``."""
        t = np.concatenate(self.transitions[h - 1]) if self.transitions[h - 1] else np.zeros((0, 3), int)
        r = instance.rewards(reward)[h - 1][t[:, 0], t[:, 1]]
        return np.column_stack([t[:, 0], t[:, 1], r, t[:, 2]])


def _deployment_bonus(instance: LinearMDP, batch: EpisodeBatch, accs, h_k: int) -> float:
    """``sum_n sum_{h<=h_k} ||phi(s_h, a_h)||_{Lambda_h^{-1}}`` over the batch."""
    total = 0.0
    for h in range(1, h_k + 1):
        norms = bonus_norms(instance, h, accs[h - 1].inverse)
        total += norms[batch.states[h - 1], batch.actions[h - 1]].sum()
    return float(total)


def deployment_budget(instance: LinearMDP, c_K: float) -> int:
    return int(c_K * instance.d * instance.H) + 1


def _check(epsilon: float, c_K: float, N: int) -> None:
    if not 0 < epsilon < 1:
        raise ConfigurationError("epsilon must lie in (0, 1)")
    if c_K < 2:
        raise ConfigurationError("c_K must be at least 2")
    if N < 1:
        raise ConfigurationError("N must be positive")


def _layer_by_layer(
    instance: LinearMDP,
    epsilon: float,
    c_K: float,
    N: int,
    beta: float,
    seed: int,
    reward,
    threshold_scale: float,
    lambda_reg: float,
) -> tuple[DeterministicPolicy | None, RewardFreeDataset, DeploymentLog]:
    H = instance.H
    data = RewardFreeDataset.empty(instance)
    log = DeploymentLog()
    h_k = 1
    for k in range(1, deployment_budget(instance, c_K) + 1):
        start = time.perf_counter()
        accs = [data.layers[h].accumulator(instance.phi[h], lambda_reg) for h in range(h_k)]
        qfun, policy = lsvi_backup(instance, data.layers, accs, h_k, beta, float(H), reward)
        batch = sample_episodes(instance, policy, N, stream(seed, k), uniform_after=h_k)
        bonus_sum = _deployment_bonus(instance, batch, accs, h_k)
        delta = 2.0 * beta * bonus_sum / N
        data.add_batch(batch)
        small = delta < epsilon * h_k / threshold_scale
        log.records.append(
            DeploymentRecord(
                k, h_k, delta, small, policy, qfun.initial_value(instance), N, time.perf_counter() - start, bonus_sum
            )
        )
        if small:
            if h_k == H:
                log.terminal, log.returned_k = "ReturnedPolicy", k
                return policy, data, log
            h_k += 1
    return None, data, log


def run_deterministic_derl(
    instance: LinearMDP,
    reward: RewardSpec | None,
    epsilon: float,
    delta: float,
    c_K: float,
    N: int,
    beta: float,
    seed: int = 0,
    lambda_reg: float = 1.0,
) -> tuple[DeterministicPolicy | None, DeploymentLog]:
    """Reward-aware layer-by-layer exploration.

    ``delta`` only enters through ``beta`` (see ``theoretical_beta``); it is
    accepted for signature parity.  Returns ``(None, log)`` when the budget
    ``c_K d H + 1`` runs out before the last layer is certified."""
    _check(epsilon, c_K, N)
    if not 0 < delta < 1:
        raise ConfigurationError("delta must lie in (0, 1)")
    policy, _, log = _layer_by_layer(instance, epsilon, c_K, N, beta, seed, reward, 2.0 * instance.H, lambda_reg)
    return policy, log


def run_reward_free_exploration(
    instance: LinearMDP,
    epsilon: float,
    delta: float,
    c_K: float,
    N: int,
    beta: float,
    seed: int = 0,
    lambda_reg: float = 1.0,
) -> tuple[RewardFreeDataset, DeploymentLog]:
    """Exploration phase driven by the reward ``u_h / H``; never reads the instance reward."""
    _check(epsilon, c_K, N)
    H = instance.H

    def bonus_reward(h: int, u: np.ndarray) -> np.ndarray:
        return u / H

    _, data, log = _layer_by_layer(
        instance, epsilon, c_K, N, beta, seed, bonus_reward, (4.0 * H + 2.0) * H, lambda_reg
    )
    return data, log


def plan_from_dataset(
    instance: LinearMDP,
    dataset: RewardFreeDataset,
    reward: RewardSpec | None,
    h_tilde: int,
    beta: float,
    lambda_reg: float = 1.0,
) -> tuple[DeterministicPolicy, float]:
    """Optimistic planning on logged data for layers ``1..h_tilde``; returns the greedy policy and ``V_1``."""
    if not 1 <= h_tilde <= instance.H:
        raise ConfigurationError("h_tilde out of range")
    for h in range(1, h_tilde + 1):
        if dataset.layers[h - 1].n == 0:
            raise PlanningError(f"no data logged at layer {h}")
    accs = [dataset.layers[h].accumulator(instance.phi[h], lambda_reg) for h in range(h_tilde)]
    qfun, policy = lsvi_backup(instance, dataset.layers, accs, h_tilde, beta, float(h_tilde), reward)
    return policy, qfun.initial_value(instance)
