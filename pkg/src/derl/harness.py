"""Config-driven experiment runs: instance construction, seed fan-out, metrics and CSV/JSON output."""

from __future__ import annotations

import csv
import io
import json
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from . import lemmas
from .arbitrary import reachability_coefficient, run_arbitrary_derl, save_covers
from .deterministic import plan_from_dataset, run_deterministic_derl, run_reward_free_exploration
from .hard import HardInstanceSpec, build_hard_mdp, enumerate_family_deterministic, load_manifest
from .mdp import (
    ConfigurationError,
    LinearMDP,
    RewardSpec,
    action_indexed_mdp,
    evaluate_policy_exact,
    optimal_value_exact,
    random_linear_mdp,
)

SCHEMA_VERSION = 1
EXPERIMENTS = ("DetDerl", "RewardFree", "ArbDerl", "LowerBoundScaling", "LemmaFuzz")
WORKERS_ENV = "DERL_WORKERS"

EXIT_OK, EXIT_CONFIG, EXIT_BUDGET, EXIT_INVARIANT = 0, 2, 3, 4

DEFAULTS = {
    "N": 5000,
    "beta": 1.0,
    "epsilon": 0.1,
    "delta": 0.1,
    "c_K": 2.0,
    "planning_beta": 0.1,
    "extra_rewards": 2,
    "reward_seed": 1,
    "i_max": 500,
    "eps0": 1e-4,
    "beta_prime": 0.01,
    "nu_min": None,
    "trials": 10**5,
    "structured_trials": 1000,
    "d_grid": [4, 6],
    "H_grid": [4, 6, 8],
    "bump": 0.25,
    "arb_i_max": 5000,
    "arb_N": 100000,
}

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ExperimentConfig:
    experiment: str
    instance: dict
    params: dict
    seeds: tuple[int, ...]
    output_dir: str | None = None

    def __post_init__(self):
        if self.experiment not in EXPERIMENTS:
            raise ConfigurationError(f"unknown experiment {self.experiment!r}")
        if not self.seeds:
            raise ConfigurationError("seed list must be non-empty")
        unknown = set(self.params) - set(DEFAULTS)
        if unknown:
            raise ConfigurationError(f"unknown parameters {sorted(unknown)}")
        src = self.instance.get("kind") if self.experiment not in ("LemmaFuzz", "LowerBoundScaling") else "none"
        if src not in ("hard", "file", "manifest", "random", "none"):
            raise ConfigurationError(f"unknown instance kind {src!r}")
        if src in ("file", "manifest") and not Path(self.instance.get("path", "")).is_file():
            raise ConfigurationError(f"instance file {self.instance.get('path')!r} does not exist")

    def param(self, key: str) -> Any:
        return self.params.get(key, DEFAULTS[key])

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        if data.get("schema_version") != SCHEMA_VERSION:
            raise ConfigurationError(f"schema_version must be {SCHEMA_VERSION}")
        try:
            return cls(
                data["experiment"],
                dict(data.get("instance", {})),
                dict(data.get("params", {})),
                tuple(int(s) for s in data["seeds"]),
                data.get("output_dir"),
            )
        except KeyError as exc:
            raise ConfigurationError(f"missing config field {exc}") from None

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            data = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigurationError(f"cannot read config: {exc}") from None
        return cls.from_dict(data)

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "experiment": self.experiment,
            "instance": self.instance,
            "params": self.params,
            "seeds": list(self.seeds),
            "output_dir": self.output_dir,
        }


@dataclass
class ExperimentReport:
    experiment: str
    rows: list[dict] = field(default_factory=list)
    aggregate: dict = field(default_factory=dict)
    violations: list[str] = field(default_factory=list)
    runtimes: list[float] = field(default_factory=list)

    @property
    def budget_exhausted(self) -> bool:
        return any(r.get("terminal") == "BudgetExhausted" for r in self.rows)

    @property
    def exit_code(self) -> int:
        if self.violations:
            return EXIT_INVARIANT
        if self.budget_exhausted:
            return EXIT_BUDGET
        return EXIT_OK

    def csv(self) -> str:
        if not self.rows:
            return ""
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=list(self.rows[0]), lineterminator="\n")
        writer.writeheader()
        for row in self.rows:
            writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
        return buf.getvalue()

    def to_dict(self) -> dict:
        return {
            "experiment": self.experiment,
            "aggregate": self.aggregate,
            "violations": self.violations,
            "runtimes": self.runtimes,
            "exit_code": self.exit_code,
        }


# instances --------------------------------------------------------------


def _hard_family(d: int, H: int, bump: float) -> list[HardInstanceSpec]:
    return enumerate_family_deterministic(d, H, bump)[:-1]  # drop the null instance


def resolve_instance(source: dict, seed: int) -> LinearMDP:
    """The instance a given seed runs on; hard families and manifests cycle through their members."""
    kind = source.get("kind")
    if kind == "hard":
        if source.get("family", True):
            fam = _hard_family(source["d"], source["H"], source["epsilon"])
            return build_hard_mdp(fam[seed % len(fam)])
        return build_hard_mdp(HardInstanceSpec.from_dict(source["spec"]))
    if kind == "manifest":
        specs = load_manifest(source["path"])
        return build_hard_mdp(specs[seed % len(specs)])
    if kind == "file":
        return LinearMDP.load(source["path"])
    if kind == "random":
        rng = np.random.default_rng(source.get("seed", 0))
        return random_linear_mdp(
            rng, source["d"], source["H"], source["states"], source["actions"], source.get("concentration", 0.3)
        )
    raise ConfigurationError(f"unknown instance kind {kind!r}")


def reward_family(instance: LinearMDP, extra: int, seed: int) -> list[RewardSpec | None]:
    """The instance reward followed by ``extra`` rewards with ``theta ~ U[0, 1]``."""
    rng = np.random.default_rng(seed)
    return [None] + [RewardSpec(theta=rng.uniform(0, 1, instance.theta.shape)) for _ in range(extra)]


def _gap(instance: LinearMDP, policy, reward=None) -> float:
    return optimal_value_exact(instance, reward)[0] - evaluate_policy_exact(instance, policy, reward)


# per-seed tasks ---------------------------------------------------------


def _det_task(cfg: ExperimentConfig, seed: int, out: Path | None) -> dict:
    inst = resolve_instance(cfg.instance, seed)
    eps = cfg.param("epsilon")
    start = time.perf_counter()
    pi, dlog = run_deterministic_derl(
        inst, None, eps, cfg.param("delta"), cfg.param("c_K"), cfg.param("N"), cfg.param("beta"), seed=seed
    )
    runtime = time.perf_counter() - start
    gap = _gap(inst, pi) if pi is not None else float("nan")
    if out is not None:
        dlog.to_csv(inst, None, out / f"deployments_seed{seed}.csv")
    over = sum(r.value_estimate >= optimal_value_exact(inst, h_trunc=r.h_k)[0] - 1e-9 for r in dlog.records)
    return {
        "seed": seed,
        "K": dlog.num_deployments,
        "terminal": dlog.terminal,
        "suboptimality": gap,
        "success": int(pi is not None and gap <= eps + 1e-9),
        "overestimates": int(over),
        "_runtime": runtime,
    }


def _reward_free_task(cfg: ExperimentConfig, seed: int, out: Path | None) -> dict:
    inst = resolve_instance(cfg.instance, seed)
    eps = cfg.param("epsilon")
    start = time.perf_counter()
    data, dlog = run_reward_free_exploration(
        inst, eps, cfg.param("delta"), cfg.param("c_K"), cfg.param("N"), cfg.param("beta"), seed=seed
    )
    gaps = []
    if dlog.returned:
        for r in reward_family(inst, cfg.param("extra_rewards"), cfg.param("reward_seed")):
            pi, _ = plan_from_dataset(inst, data, r, inst.H, cfg.param("planning_beta"))
            gaps.append(_gap(inst, pi, r))
    runtime = time.perf_counter() - start
    if out is not None:
        dlog.to_csv(inst, None, out / f"deployments_seed{seed}.csv")
    worst = max(gaps) if gaps else float("nan")
    return {
        "seed": seed,
        "K": dlog.num_deployments,
        "terminal": dlog.terminal,
        "suboptimality": worst,
        "success": int(bool(gaps) and worst <= eps + 1e-9),
        "_runtime": runtime,
    }


def _arb_params(cfg: ExperimentConfig, inst: LinearMDP, i_max_key: str = "i_max") -> tuple:
    nu = cfg.param("nu_min")
    if nu is None:
        nu = reachability_coefficient(inst).nu_min
    return cfg.param(i_max_key), cfg.param("eps0"), cfg.param("beta_prime"), nu, cfg.param("N")


def _arb_task(cfg: ExperimentConfig, seed: int, out: Path | None) -> dict:
    inst = resolve_instance(cfg.instance, seed)
    eps = cfg.param("epsilon")
    start = time.perf_counter()
    data, covers = run_arbitrary_derl(inst, *_arb_params(cfg, inst), seed=seed)
    gaps = []
    for r in reward_family(inst, cfg.param("extra_rewards"), cfg.param("reward_seed")):
        pi, _ = plan_from_dataset(inst, data, r, inst.H, cfg.param("planning_beta"))
        gaps.append(_gap(inst, pi, r))
    runtime = time.perf_counter() - start
    if out is not None:
        save_covers(covers, out / f"covers_seed{seed}.json")
    worst = max(gaps)
    return {
        "seed": seed,
        "K": len(covers),
        "H": inst.H,
        "terminal": "ReturnedPolicy",
        "suboptimality": worst,
        "success": int(worst <= eps + 1e-9),
        "broke": int(all(c.broke for c in covers)),
        "_runtime": runtime,
    }


def _scaling_task(cfg: ExperimentConfig, task: tuple[int, int, int], out: Path | None) -> dict:
    d, H, seed = task
    fam = _hard_family(d, H, cfg.param("bump"))
    inst = build_hard_mdp(fam[seed % len(fam)])
    start = time.perf_counter()
    pi, dlog = run_deterministic_derl(
        inst, None, cfg.param("epsilon"), cfg.param("delta"), cfg.param("c_K"), cfg.param("N"), cfg.param("beta"),
        seed=seed,
    )
    # mixture-policy deployments on the action-indexed instance of the same (d, H), whose reachability is 1/sqrt(d)
    ref = action_indexed_mdp(np.random.default_rng(seed), d, H)
    _, covers = run_arbitrary_derl(
        ref, cfg.param("arb_i_max"), cfg.param("eps0"), cfg.param("beta_prime"), 1 / np.sqrt(d), cfg.param("arb_N"), seed
    )
    return {
        "d": d,
        "H": H,
        "seed": seed,
        "K": dlog.num_deployments,
        "terminal": dlog.terminal,
        "success": int(pi is not None and _gap(inst, pi) <= cfg.param("epsilon") + 1e-9),
        "K_arb": len(covers),
        "_runtime": time.perf_counter() - start,
    }


TASKS = {"DetDerl": _det_task, "RewardFree": _reward_free_task, "ArbDerl": _arb_task, "LowerBoundScaling": _scaling_task}


def _call(args):
    fn, cfg, task, out = args
    return fn(cfg, task, out)


def workers() -> int:
    raw = os.environ.get(WORKERS_ENV, "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigurationError(f"{WORKERS_ENV} must be an integer, got {raw!r}") from None
    return max(1, n)


def _map(fn, cfg: ExperimentConfig, tasks: list, out: Path | None) -> list[dict]:
    jobs = [(fn, cfg, t, out) for t in tasks]
    n = workers()
    if n == 1 or len(jobs) == 1:
        return [_call(j) for j in jobs]
    with ProcessPoolExecutor(n) as pool:
        return list(pool.map(_call, jobs))


# aggregation ------------------------------------------------------------


def fit_line(x, y) -> dict:
    """Least-squares slope, intercept and R^2; empty when fewer than two distinct x make the fit undefined."""
    x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    if len(np.unique(x)) < 2:
        return {}
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - (slope * x + intercept)
    ss = ((y - y.mean()) ** 2).sum()
    r2 = 1.0 - (resid**2).sum() / ss if ss > 0 else 1.0
    return {"slope": float(slope), "intercept": float(intercept), "r2": float(r2)}


def lower_bound_scaling(d_grid, H_grid, epsilon: float, N: int, seeds, **params) -> ExperimentReport:
    """Mean deployments of the deterministic algorithm against ``d H`` on the hard family.

    Each grid point also runs the mixture-policy algorithm, whose deployment
    count must equal the horizon whatever ``d`` is."""
    cfg = ExperimentConfig(
        "LowerBoundScaling", {}, {"d_grid": list(d_grid), "H_grid": list(H_grid), "epsilon": epsilon, "N": N, **params},
        tuple(seeds),
    )
    return run_experiment(cfg)


def _scaling_aggregate(rows: list[dict], report: ExperimentReport) -> None:
    cells = sorted({(r["d"], r["H"]) for r in rows})
    mean_k = [float(np.mean([r["K"] for r in rows if (r["d"], r["H"]) == c])) for c in cells]
    fit = fit_line([d * H for d, H in cells], mean_k)
    report.aggregate.update(
        {
            "cells": [{"d": d, "H": H, "mean_K": k} for (d, H), k in zip(cells, mean_k)],
            **fit,
            "success_rate": float(np.mean([r["success"] for r in rows])),
        }
    )
    for r in rows:
        if r["K_arb"] != r["H"]:
            report.violations.append(f"mixture-policy run used {r['K_arb']} deployments on horizon {r['H']}")


def run_experiment(cfg: ExperimentConfig) -> ExperimentReport:
    report = ExperimentReport(cfg.experiment)
    out = Path(cfg.output_dir) if cfg.output_dir else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    if cfg.experiment == "LemmaFuzz":
        seed = cfg.seeds[0]
        reports = [
            lemmas.fuzz_trace_det(cfg.param("trials"), seed),
            lemmas.fuzz_matrix_perturbation(cfg.param("trials"), seed),
            lemmas.fuzz_elliptical_potential(cfg.param("trials"), seed),
            lemmas.fuzz_batched_potential(cfg.param("structured_trials"), seed),
        ]
        report.rows = [r.to_dict() for r in reports]
        report.aggregate = {"failures": sum(r.failures for r in reports)}
        report.violations = [f"{r.name}: {r.failures} failures" for r in reports if r.failures]
    elif cfg.experiment == "LowerBoundScaling":
        tasks = [(d, H, s) for d in cfg.param("d_grid") for H in cfg.param("H_grid") for s in cfg.seeds]
        rows = _map(_scaling_task, cfg, tasks, out)
        rows.sort(key=lambda r: (r["d"], r["H"], r["seed"]))
        report.runtimes = [r.pop("_runtime") for r in rows]
        report.rows = rows
        _scaling_aggregate(rows, report)
    else:
        rows = _map(TASKS[cfg.experiment], cfg, sorted(cfg.seeds), out)
        report.runtimes = [r.pop("_runtime") for r in rows]
        report.rows = rows
        report.aggregate = {
            "success_rate": float(np.mean([r["success"] for r in rows])),
            "mean_K": float(np.mean([r["K"] for r in rows])),
        }
        if cfg.experiment == "ArbDerl":
            report.violations += [f"seed {r['seed']}: K={r['K']} != H={r['H']}" for r in rows if r["K"] != r["H"]]

    if out is not None:
        (out / "rows.csv").write_text(report.csv())
        (out / "report.json").write_text(json.dumps(report.to_dict(), indent=1))
    return report
