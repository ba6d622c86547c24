"""Executable checks of the matrix inequalities behind the deployment bounds, with seeded fuzzers."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from .mdp import ConfigurationError

NORM_TOL = 1e-9


@dataclass(frozen=True)
class BatchSequence:
    """``K`` batches of feature vectors; batch ``k`` adds ``Phi_{k-1} = sum phi phi^T`` to ``A``.

    A batch is either an ``(N, d)`` array of vectors or a pair ``(directions,
    multiplicities)`` meaning each direction is repeated that many times, which
    keeps structured batches with huge ``N`` cheap."""

    d: int
    updates: tuple[np.ndarray, ...]
    sizes: tuple[int, ...]

    @classmethod
    def from_vectors(cls, batches: Sequence[np.ndarray]) -> "BatchSequence":
        batches = [np.atleast_2d(np.asarray(b, dtype=np.float64)) for b in batches]
        return cls.from_weighted([(b, np.ones(len(b))) for b in batches])

    @classmethod
    def from_weighted(cls, batches: Sequence[tuple[np.ndarray, np.ndarray]]) -> "BatchSequence":
        if not batches:
            raise ConfigurationError("need at least one batch")
        d = np.atleast_2d(batches[0][0]).shape[1]
        updates, sizes = [], []
        for vecs, mult in batches:
            vecs = np.atleast_2d(np.asarray(vecs, dtype=np.float64))
            mult = np.asarray(mult, dtype=np.float64)
            if vecs.shape[1] != d:
                raise ConfigurationError("inconsistent dimension")
            if (np.linalg.norm(vecs, axis=1) > 1.0 + NORM_TOL).any():
                raise ConfigurationError("feature norm exceeds 1")
            if (mult < 0).any():
                raise ConfigurationError("negative multiplicity")
            updates.append((vecs * mult[:, None]).T @ vecs)
            sizes.append(int(round(mult.sum())))
        return cls(d, tuple(updates), tuple(sizes))

    @property
    def K(self) -> int:
        return len(self.updates)

    def matrices(self) -> list[np.ndarray]:
        """``A_0 = I, A_N, ..., A_{KN}``."""
        out = [np.eye(self.d)]
        for phi in self.updates:
            out.append(out[-1] + phi)
        return out


def batch_traces(seq: BatchSequence) -> np.ndarray:
    """``Tr(A_{(k-1)N}^{-1} Phi_{k-1})`` for ``k = 1..K``."""
    mats = seq.matrices()
    return np.array([np.trace(np.linalg.solve(mats[k], seq.updates[k])) for k in range(seq.K)])


def violation_set(seq: BatchSequence, eps: float, N: int | None = None) -> set[int]:
    """1-based batch indices whose trace reaches ``N eps``; ``N`` defaults to the largest batch size."""
    if not 0 < eps < 1:
        raise ConfigurationError("eps must lie in (0, 1)")
    N = max(seq.sizes) if N is None else N
    tr = batch_traces(seq)
    return {int(k) + 1 for k in np.flatnonzero(tr >= N * eps)}


def violation_bound(d: int, K: int, N: int, eps: float) -> float:
    """``d log(1 + KN/d) / log(N eps / (d log(1 + KN/d)))``; ``inf`` when the inner ratio is at most 1."""
    L = np.log1p(K * N / d)
    inner = N * eps / (d * L)
    return float(d * L / np.log(inner)) if inner > 1 else np.inf


def min_batch_size(d: int, H: int, eps: float, c_K: float, n_max: int = 10**12) -> int:
    """Smallest ``N`` with ``violation_bound(d, c_K d H + 1, N, eps) <= c_K d``."""
    if not 0 < eps < 1 or c_K < 2:
        raise ConfigurationError("need eps in (0, 1) and c_K >= 2")
    K = int(c_K * d * H) + 1

    def ok(n):
        return violation_bound(d, K, n, eps) <= c_K * d

    hi = 1
    while not ok(hi):
        hi *= 2
        if hi > n_max:
            raise ConfigurationError("no batch size below n_max satisfies the bound")
    lo = hi // 2
    while hi - lo > 1:
        mid = (lo + hi) // 2
        lo, hi = (lo, mid) if ok(mid) else (mid, hi)
    return hi


def trace_det_bridge_check(A, Phi) -> tuple[float, float, bool]:
    """``Tr(A^{-1} Phi) <= r log r`` with ``r = det(A + Phi) / det(A)``."""
    A = np.asarray(A, dtype=np.float64)
    Phi = np.asarray(Phi, dtype=np.float64)
    lhs = float(np.trace(np.linalg.solve(A, Phi)))
    log_r = np.linalg.slogdet(A + Phi)[1] - np.linalg.slogdet(A)[1]
    rhs = float(np.exp(log_r) * log_r)
    return lhs, rhs, lhs <= rhs + 1e-9


@dataclass(frozen=True)
class PerturbationReport:
    gap_quad: float
    gap_inverse: float
    gap_norm: float
    bound_quad: float
    bound_inverse: float
    bound_norm: float

    @property
    def holds(self) -> bool:
        return (
            self.gap_quad <= self.bound_quad + 1e-9
            and self.gap_inverse <= self.bound_inverse + 1e-9
            and self.gap_norm <= self.bound_norm + 1e-9
        )

    @property
    def slack_ratio(self) -> float:
        """Largest gap/bound ratio; 0 when every bound is 0."""
        pairs = [(self.gap_quad, self.bound_quad), (self.gap_inverse, self.bound_inverse), (self.gap_norm, self.bound_norm)]
        return max((g / b for g, b in pairs if b > 0), default=0.0)


def matrix_perturbation_check(A, Delta, phi, eps: float | None = None) -> PerturbationReport:
    """Gaps of ``A_+ = A + Delta`` against ``A`` in quadratic form, inverse and inverse norm."""
    A = np.asarray(A, dtype=np.float64)
    Delta = np.asarray(Delta, dtype=np.float64)
    phi = np.asarray(phi, dtype=np.float64)
    d = A.shape[0]
    eps = float(np.abs(Delta).max()) if eps is None else eps
    if np.linalg.eigvalsh((A + A.T) / 2)[0] < 1.0 - 1e-12:
        raise ConfigurationError("A must dominate the identity")
    if np.abs(Delta).max() > eps + 1e-15 or not eps * d < 1:
        raise ConfigurationError("need |Delta_ij| <= eps < 1/d")
    if np.linalg.norm(phi) > 1.0 + NORM_TOL:
        raise ConfigurationError("phi must have norm at most 1")
    Ap = A + Delta
    inv, inv_p = np.linalg.inv(A), np.linalg.inv(Ap)
    q, qp = phi @ inv @ phi, phi @ inv_p @ phi
    de = d * eps
    return PerturbationReport(
        float(abs(phi @ Delta @ phi)),
        float(abs(qp - q)),
        float(abs(np.sqrt(max(qp, 0.0)) - np.sqrt(max(q, 0.0)))),
        float(de),
        float(de / (1 - de)),
        float(np.sqrt(de / (1 - de))),
    )


def elliptical_potential_check(X: Sequence[np.ndarray], lam: float = 1.0) -> tuple[float, float, bool]:
    """``sum_t Tr(X_t M_{t-1}^{-1}) <= (1 + 1/lam) d log(1 + T/d)`` with ``M_0 = lam I``; needs ``lam >= 1``."""
    if lam < 1:
        raise ConfigurationError("lam must be at least 1")
    X = [np.asarray(x, dtype=np.float64) for x in X]
    d = X[0].shape[0]
    M = lam * np.eye(d)
    lhs = 0.0
    for x in X:
        lhs += float(np.trace(np.linalg.solve(M, x)))
        M = M + x
    rhs = (1 + 1 / lam) * d * np.log1p(len(X) / d)
    return lhs, float(rhs), lhs <= rhs + 1e-9


def logdet_telescoping_gap(seq: BatchSequence) -> float:
    mats = seq.matrices()
    lds = [np.linalg.slogdet(m)[1] for m in mats]
    return float(abs(sum(lds[k + 1] - lds[k] for k in range(seq.K)) - lds[-1]))


def amgm_check(A) -> tuple[float, float, bool]:
    """``log det A <= d log(Tr A / d)`` for PSD ``A``."""
    A = np.asarray(A, dtype=np.float64)
    d = A.shape[0]
    sign, ld = np.linalg.slogdet(A)
    ld = -np.inf if sign <= 0 else ld
    rhs = d * np.log(np.trace(A) / d)
    return float(ld), float(rhs), bool(ld <= rhs + 1e-9)


# fuzzers ---------------------------------------------------------------


@dataclass(frozen=True)
class FuzzReport:
    name: str
    trials: int
    failures: int
    max_slack_ratio: float
    seed: int

    def to_dict(self) -> dict:
        return asdict(self)


def save_reports(reports: Sequence[FuzzReport], path) -> None:
    with open(path, "w") as fh:
        json.dump([r.to_dict() for r in reports], fh, indent=1)


DIMS = (2, 4, 8)


def _unit_ball(rng: np.random.Generator, shape: tuple[int, ...], d: int) -> np.ndarray:
    """Random vectors with norm at most 1, a quarter of them exactly on the sphere."""
    x = rng.standard_normal(shape + (d,))
    x /= np.linalg.norm(x, axis=-1, keepdims=True)
    r = rng.uniform(0, 1, shape + (1,)) ** (1 / d)
    r[rng.uniform(size=shape + (1,)) < 0.25] = 1.0
    return x * r


def _random_A(rng: np.random.Generator, B: int, d: int) -> np.ndarray:
    """Matrices ``I + G G^T`` with spread-out scales, some nearly the identity."""
    G = rng.standard_normal((B, d, d)) * rng.choice([1e-3, 0.1, 1.0, 5.0], size=(B, 1, 1))
    return np.eye(d) + G @ np.swapaxes(G, 1, 2)


def _chunks(trials: int, size: int):
    done = 0
    while done < trials:
        n = min(size, trials - done)
        yield n
        done += n


def fuzz_trace_det(trials: int = 10**5, seed: int = 0, dims: Sequence[int] = DIMS) -> FuzzReport:
    rng = np.random.default_rng(seed)
    failures, worst = 0, 0.0
    for i, B in enumerate(_chunks(trials, 5000)):
        d = dims[i % len(dims)]
        A = _random_A(rng, B, d)
        m = int(rng.integers(1, 3 * d))
        v = _unit_ball(rng, (B, m), d) * rng.choice([0.05, 0.5, 1.0], size=(B, 1, 1))
        Phi = np.swapaxes(v, 1, 2) @ v
        lhs = np.trace(np.linalg.solve(A, Phi), axis1=1, axis2=2)
        log_r = np.linalg.slogdet(A + Phi)[1] - np.linalg.slogdet(A)[1]
        rhs = np.exp(log_r) * log_r
        failures += int((lhs > rhs + 1e-9).sum())
        pos = rhs > 1e-12
        if pos.any():
            worst = max(worst, float((lhs[pos] / rhs[pos]).max()))
    return FuzzReport("trace_det_bridge", trials, failures, worst, seed)


def fuzz_matrix_perturbation(trials: int = 10**5, seed: int = 0, dims: Sequence[int] = DIMS) -> FuzzReport:
    rng = np.random.default_rng(seed)
    failures, worst = 0, 0.0
    for i, B in enumerate(_chunks(trials, 5000)):
        d = dims[i % len(dims)]
        A = _random_A(rng, B, d)
        eps = rng.uniform(0, 1, (B, 1, 1)) * 0.999 / d
        D = rng.uniform(-1, 1, (B, d, d))
        D = (D + np.swapaxes(D, 1, 2)) / 2
        extreme = rng.uniform(size=B) < 0.2  # all entries at +-eps, the worst case for the first bound
        D[extreme] = np.sign(rng.uniform(-1, 1, (int(extreme.sum()), 1, 1))) * np.ones((d, d))
        D *= eps
        phi = _unit_ball(rng, (B,), d)
        phi[extreme] = np.ones(d) / np.sqrt(d)
        inv, inv_p = np.linalg.inv(A), np.linalg.inv(A + D)
        quad = np.abs(np.einsum("bi,bij,bj->b", phi, D, phi))
        q = np.einsum("bi,bij,bj->b", phi, inv, phi)
        qp = np.einsum("bi,bij,bj->b", phi, inv_p, phi)
        de = d * eps[:, 0, 0]
        bounds = np.stack([de, de / (1 - de), np.sqrt(de / (1 - de))], axis=1)
        gaps = np.stack([quad, np.abs(qp - q), np.abs(np.sqrt(np.clip(qp, 0, None)) - np.sqrt(q))], axis=1)
        failures += int((gaps > bounds + 1e-9).any(axis=1).sum())
        worst = max(worst, float((gaps / bounds).max()))
    return FuzzReport("matrix_perturbation", trials, failures, worst, seed)


def fuzz_elliptical_potential(trials: int = 10**5, seed: int = 0, dims: Sequence[int] = DIMS) -> FuzzReport:
    rng = np.random.default_rng(seed)
    failures, worst = 0, 0.0
    for i, B in enumerate(_chunks(trials, 5000)):
        d = dims[i % len(dims)]
        T = int(rng.integers(1, 41))
        lam = rng.uniform(1.0, 3.0, B)
        Minv = np.eye(d)[None] / lam[:, None, None]
        total = np.zeros(B)
        for _ in range(T):
            # rank-two X_t with trace at most one
            v = _unit_ball(rng, (B, 2), d)
            w = rng.dirichlet([1.0, 1.0], B)
            X = np.einsum("bk,bki,bkj->bij", w, v, v)
            total += np.einsum("bij,bji->b", X, Minv)
            Minv = np.linalg.inv(np.linalg.inv(Minv) + X)
        rhs = (1 + 1 / lam) * d * np.log1p(T / d)
        failures += int((total > rhs + 1e-9).sum())
        worst = max(worst, float((total / rhs).max()))
    return FuzzReport("elliptical_potential", trials, failures, worst, seed)


def structured_sequence(rng: np.random.Generator, d: int, K: int, N: int, eps: float) -> BatchSequence:
    """A batch sequence mixing adversarial and random batches, each of exactly ``N`` vectors.

    The adversarial batches aim all mass at the currently least-explored
    eigendirection, which is how violations are manufactured most cheaply."""
    A = np.eye(d)
    batches = []
    for _ in range(K):
        kind = rng.integers(4)
        if kind == 0:  # least explored direction, full norm
            vals, vecs = np.linalg.eigh(A)
            dirs, mult = vecs[:, :1].T, np.array([N])
        elif kind == 1:  # least explored direction, norm just reaching the threshold
            vals, vecs = np.linalg.eigh(A)
            s = min(1.0, np.sqrt(eps * vals[0]) * (1 + 1e-6))
            dirs, mult = s * vecs[:, :1].T, np.array([N])
        elif kind == 2:  # a few random directions
            m = int(rng.integers(1, d + 1))
            dirs = _unit_ball(rng, (m,), d)
            mult = rng.multinomial(N, np.full(m, 1.0 / m))
        else:  # nothing new
            dirs, mult = np.zeros((1, d)), np.array([N])
        batches.append((dirs, mult))
        A = A + (dirs * mult[:, None]).T @ dirs
    return BatchSequence.from_weighted(batches)


def fuzz_batched_potential(
    trials: int = 1000, seed: int = 0, dims: Sequence[int] = (2, 3, 4), H: int = 2, eps: float = 0.5, c_K: float = 2.0
) -> FuzzReport:
    """``|K+| <= c_K d`` with ``K = c_K d H + 1`` and ``N = min_batch_size(d, H, eps, c_K)``."""
    rng = np.random.default_rng(seed)
    failures, worst = 0, 0.0
    for t in range(trials):
        d = dims[t % len(dims)]
        K = int(c_K * d * H) + 1
        N = min_batch_size(d, H, eps, c_K)
        seq = structured_sequence(rng, d, K, N, eps)
        count = len(violation_set(seq, eps, N))
        failures += int(count > c_K * d)
        worst = max(worst, count / (c_K * d))
    return FuzzReport("batched_potential", trials, failures, worst, seed)


def run_all(seed: int = 0, trials: int = 10**5, structured_trials: int = 1000) -> list[FuzzReport]:
    return [
        fuzz_trace_det(trials, seed),
        fuzz_matrix_perturbation(trials, seed),
        fuzz_elliptical_potential(trials, seed),
        fuzz_batched_potential(structured_trials, seed),
    ]
