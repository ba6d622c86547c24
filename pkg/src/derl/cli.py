"""Command-line entry point: ``derl run | fuzz-lemmas | gen-hard | reachability``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import lemmas
from .arbitrary import reachability_coefficient
from .harness import EXIT_CONFIG, EXIT_INVARIANT, EXIT_OK, ExperimentConfig, run_experiment
from .hard import HardInstanceSpec, build_hard_mdp, enumerate_family_deterministic, save_manifest
from .mdp import ConfigurationError, LinearMDP


def _run(args) -> int:
    cfg = ExperimentConfig.load(args.config)
    if args.out:
        cfg = ExperimentConfig(cfg.experiment, cfg.instance, cfg.params, cfg.seeds, args.out)
    report = run_experiment(cfg)
    print(json.dumps(report.to_dict()["aggregate"], indent=1))
    for v in report.violations:
        print(f"invariant violation: {v}", file=sys.stderr)
    return report.exit_code


def _fuzz(args) -> int:
    reports = lemmas.run_all(args.seed, args.trials, args.structured_trials)
    for r in reports:
        print(f"{r.name}: trials={r.trials} failures={r.failures} max_slack_ratio={r.max_slack_ratio:.6f}")
    if args.out:
        lemmas.save_reports(reports, args.out)
    return EXIT_INVARIANT if any(r.failures for r in reports) else EXIT_OK


def _gen_hard(args) -> int:
    core = tuple([0] * args.H)
    spec = HardInstanceSpec(args.d, args.H, args.h_sharp, args.i_sharp, core, args.epsilon)
    build_hard_mdp(spec).save(args.out)
    if args.manifest:
        save_manifest(enumerate_family_deterministic(args.d, args.H, args.epsilon), args.manifest)
    print(json.dumps(spec.to_dict()))
    return EXIT_OK


def _reachability(args) -> int:
    inst = LinearMDP.load(args.instance)
    print(json.dumps(reachability_coefficient(inst, args.method, cap=args.cap).to_dict(), indent=1))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="derl", description="Deployment-efficient exploration in linear MDPs.")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run an experiment config")
    r.add_argument("config", type=Path)
    r.add_argument("--out", help="override the config's output directory")
    r.set_defaults(fn=_run)

    f = sub.add_parser("fuzz-lemmas", help="fuzz the matrix inequalities")
    f.add_argument("--trials", type=int, default=10**5)
    f.add_argument("--structured-trials", type=int, default=1000)
    f.add_argument("--seed", type=int, default=0)
    f.add_argument("--out", help="JSON report path")
    f.set_defaults(fn=_fuzz)

    g = sub.add_parser("gen-hard", help="write a lower-bound instance as JSON")
    g.add_argument("--d", type=int, required=True)
    g.add_argument("--H", type=int, required=True)
    g.add_argument("--epsilon", type=float, required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--h-sharp", type=int, default=1)
    g.add_argument("--i-sharp", type=int, default=1)
    g.add_argument("--manifest", help="also write the family manifest here")
    g.set_defaults(fn=_gen_hard)

    c = sub.add_parser("reachability", help="reachability coefficient of an instance JSON")
    c.add_argument("instance", type=Path)
    c.add_argument("--method", choices=["BruteForce", "SvdLowerBound"], default="BruteForce")
    c.add_argument("--cap", type=int, default=10**4)
    c.set_defaults(fn=_reachability)
    return p


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigurationError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
