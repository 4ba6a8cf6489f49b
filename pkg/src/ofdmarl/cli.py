"""Command-line entry point.

Subcommands: train, eval, bench, gradcheck, selftest, bands, rerun.
Exit codes: 0 ok, 1 check failed, 2 usage/config error, 3 numeric failure.

Every run writes a ``manifest.json`` into its output directory before any
computation starts; ``rerun`` replays a manifest into a new directory and
reproduces all CSVs byte for byte. The master seed comes from ``--seed``,
falling back to the OFDMARL_SEED environment variable, then 0.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from pathlib import Path

import ofdmarl
from ofdmarl.config import (WorkbenchConfig, apply_variant, config_from_dict,
                            config_to_dict, load_config, VARIANTS)
from ofdmarl.errors import ConfigError, NumericError
from ofdmarl.harness import (aggregate_bands, make_policy, make_split,
                             rollout, run_benchmark, run_eval, run_training,
                             write_benchmark_csv, write_eval_csv)
from ofdmarl.env import TrajectoryWriter
from ofdmarl.selftest import (GRADCHECK_TOLERANCE, composed_gradient_error,
                              run_selftest)


def _resolve_seed(arg_seed: int | None) -> int:
    if arg_seed is not None:
        return arg_seed
    env = os.environ.get("OFDMARL_SEED")
    return int(env) if env else 0


def _load_cfg(path: str | None) -> WorkbenchConfig:
    if path is None:
        return WorkbenchConfig()
    if not Path(path).exists():
        raise FileNotFoundError(f"config file not found: {path}")
    return load_config(path)


def _write_manifest(out_dir: Path, resolved: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {"tool": "ofdmarl", "version": ofdmarl.__version__, **resolved}
    (out_dir / "manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# resolved-invocation executors (shared by the subcommands and `rerun`)
# ---------------------------------------------------------------------------


def _execute_train(resolved: dict, out_dir: Path) -> int:
    _write_manifest(out_dir, resolved)
    cfg = config_from_dict(resolved["config"])
    seed = resolved["master_seed"]
    split = make_split(seed, cfg.run.n_training_seeds, cfg.run.n_eval_seeds,
                       cfg.run.n_test_seeds)
    result = run_training(cfg, split, seed, out_dir,
                          debug_nan_at=resolved.get("debug_nan_at"))
    if result.aborted:
        print(f"numeric failure: {result.error}", file=sys.stderr)
        print(f"last good checkpoint: {result.final_checkpoint}",
              file=sys.stderr)
        return 3
    print(f"trained {result.episodes_completed} episodes; "
          f"logs in {out_dir}")
    return 0


def _execute_eval(resolved: dict, out_dir: Path) -> int:
    _write_manifest(out_dir, resolved)
    cfg = config_from_dict(resolved["config"])
    seed = resolved["master_seed"]
    split = make_split(seed, cfg.run.n_training_seeds, cfg.run.n_eval_seeds,
                       cfg.run.n_test_seeds)
    seeds = split.eval_seeds[: resolved["n_seeds"]]
    policy = make_policy(resolved["agent"], cfg.cell)
    if resolved.get("trajectory"):
        with open(out_dir / "trajectory.csv", "w", newline="") as f:
            writer = TrajectoryWriter(f)
            rollout(policy, cfg.cell, seeds[0], resolved["steps"], writer)
    report = run_eval(policy, cfg.cell, seeds, resolved["steps"])
    write_eval_csv(report, out_dir / "eval_report.csv")
    print(f"mean reward {report.mean!r} over {len(seeds)} environments")
    return 0


def _execute_bench(resolved: dict, out_dir: Path) -> int:
    _write_manifest(out_dir, resolved)
    cfg = config_from_dict(resolved["config"])
    seed = resolved["master_seed"]
    split = make_split(seed, cfg.run.n_training_seeds, cfg.run.n_eval_seeds,
                       max(cfg.run.n_test_seeds, resolved["n_test_seeds"]))
    seeds = split.test_seeds[: resolved["n_test_seeds"]]
    reports = run_benchmark(resolved["agents"], cfg.cell, seeds,
                            resolved["steps"], jobs=resolved.get("jobs", 1))
    write_benchmark_csv(reports, out_dir / "benchmark.csv")
    for spec, report in reports.items():
        print(f"{spec}: mean {report.mean!r} median {report.median!r}")
    return 0


_EXECUTORS = {"train": _execute_train, "eval": _execute_eval,
              "bench": _execute_bench}


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_train(args) -> int:
    cfg = _load_cfg(args.config)
    if args.variant:
        cfg = WorkbenchConfig(cell=cfg.cell,
                              train=apply_variant(cfg.train, args.variant),
                              run=cfg.run)
    if args.episodes or args.steps_per_episode:
        run = cfg.run
        if args.episodes:
            run = dataclasses.replace(run, episodes=args.episodes)
        if args.steps_per_episode:
            run = dataclasses.replace(run, steps_per_episode=args.steps_per_episode)
        cfg = WorkbenchConfig(cell=cfg.cell, train=cfg.train, run=run)
    cfg.validate()
    resolved = {
        "subcommand": "train",
        "master_seed": _resolve_seed(args.seed),
        "variant": args.variant,
        "config": config_to_dict(cfg),
        "debug_nan_at": args.debug_nan_at,
    }
    return _execute_train(resolved, Path(args.out))


def cmd_eval(args) -> int:
    cfg = _load_cfg(args.config)
    resolved = {
        "subcommand": "eval",
        "master_seed": _resolve_seed(args.seed),
        "agent": args.agent,
        "steps": args.steps,
        "n_seeds": args.eval_seeds,
        "trajectory": args.trajectory,
        "config": config_to_dict(cfg),
    }
    make_policy(args.agent, cfg.cell)     # validate spec before writing anything
    return _execute_eval(resolved, Path(args.out))


def cmd_bench(args) -> int:
    cfg = _load_cfg(args.config)
    agents = [a.strip() for a in args.agents.split(",") if a.strip()]
    if not agents:
        raise ConfigError("--agents must name at least one agent")
    for spec in agents:
        make_policy(spec, cfg.cell)
    resolved = {
        "subcommand": "bench",
        "master_seed": _resolve_seed(args.seed),
        "agents": agents,
        "steps": args.steps,
        "n_test_seeds": args.test_seeds,
        "jobs": args.jobs,
        "config": config_to_dict(cfg),
    }
    return _execute_bench(resolved, Path(args.out))


def cmd_gradcheck(args) -> int:
    worst = max(composed_gradient_error(seed, inject_fault=args.inject_fault)
                for seed in range(args.instances))
    status = "PASS" if worst < args.tolerance else "FAIL"
    print(f"{status} gradcheck: max relative error {worst:.3e} "
          f"(tolerance {args.tolerance:g}, {args.instances} instances)")
    return 0 if worst < args.tolerance else 1


def cmd_selftest(args) -> int:
    results = run_selftest(inject_gradient_fault=args.inject_gradient_fault)
    all_passed = True
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'} {r.name}: {r.detail}")
        all_passed &= r.passed
    return 0 if all_passed else 1


def cmd_bands(args) -> int:
    aggregate_bands(args.eval_logs, args.out)
    print(f"wrote {args.out}")
    return 0


def cmd_rerun(args) -> int:
    manifest = json.loads(Path(args.manifest).read_text(encoding="utf-8"))
    executor = _EXECUTORS.get(manifest.get("subcommand"))
    if executor is None:
        raise ConfigError(
            f"manifest subcommand {manifest.get('subcommand')!r} not rerunnable")
    resolved = {k: v for k, v in manifest.items()
                if k not in ("tool", "version")}
    return executor(resolved, Path(args.out))


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ofdmarl",
        description="OFDMA downlink scheduling workbench")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--config", help="YAML config file (defaults if omitted)")
        p.add_argument("--seed", type=int, default=None,
                       help="master seed (fallback: OFDMARL_SEED, then 0)")

    p = sub.add_parser("train", help="train a DQN scheduler")
    add_common(p)
    p.add_argument("--variant", choices=VARIANTS, default=None,
                   help="feature-technique preset")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--episodes", type=int, default=None,
                   help="override the episode budget")
    p.add_argument("--steps-per-episode", type=int, default=None,
                   help="override allocation steps per episode")
    p.add_argument("--debug-nan-at", type=int, default=None,
                   help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate one agent on the eval seeds")
    add_common(p)
    p.add_argument("--agent", required=True,
                   help="rrit | pfca | knapsack | random | dqn:<ckpt>")
    p.add_argument("--steps", type=int, default=17_500)
    p.add_argument("--eval-seeds", type=int, default=5,
                   help="number of evaluation environments")
    p.add_argument("--trajectory", action="store_true",
                   help="dump a per-step trajectory CSV for the first seed")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="benchmark agents on the test seeds")
    add_common(p)
    p.add_argument("--agents", required=True,
                   help="comma-separated agent specs")
    p.add_argument("--steps", type=int, default=65_536)
    p.add_argument("--test-seeds", type=int, default=300)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("gradcheck", help="finite-difference gradient check")
    p.add_argument("--tolerance", type=float, default=GRADCHECK_TOLERANCE)
    p.add_argument("--instances", type=int, default=5)
    p.add_argument("--inject-fault", action="store_true",
                   help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("selftest", help="run the built-in invariant suite")
    p.add_argument("--inject-gradient-fault", action="store_true",
                   help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_selftest)

    p = sub.add_parser("bands", help="aggregate eval logs into band columns")
    p.add_argument("eval_logs", nargs="+")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_bands)

    p = sub.add_parser("rerun", help="replay a manifest into a new directory")
    p.add_argument("manifest")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_rerun)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
