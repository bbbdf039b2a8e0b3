#!/usr/bin/env python3
"""
td-lsys: finite-time experiments for tabular TD-learning viewed as a
stochastic linear system.

    td_lsys.py run --config configs/reference_demo.yaml [--only exact bounds] [--out DIR] [--seed N]
    td_lsys.py gen-mdp --n-states 4 --n-actions 2 --gamma 0.9 --seed 7 --out mdp.json
    td_lsys.py demo off-policy --epsilon 0.5
    td_lsys.py show output/reference_demo
"""

import argparse
import dataclasses
import logging
import os
import sys

from dotenv import load_dotenv
from tabulate import tabulate

from config_manager import STAGES, ConfigManager, RandomMdpSpec
from divergence_demo import OffPolicySpec, forced_sequence, sampled_demo, threshold_table
from experiment_runner import generate_random_mdp, run_experiment
from mdp_core import induce_chain, save_mdp_document

logging.basicConfig(level=logging.INFO, format='%(asctime)s - %(name)s - %(levelname)s - %(message)s')
logger = logging.getLogger(__name__)


def cmd_run(args) -> int:
    manager = ConfigManager()
    config = manager.load_experiment_config(args.config)
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.workers is not None:
        overrides["n_workers"] = args.workers
    if args.progress:
        overrides["progress"] = True
    if overrides:
        config = dataclasses.replace(config, **overrides)
    out_dir = args.out or os.path.join(config.output_dir, config.name)

    runner, files = run_experiment(config, out_dir=out_dir, stages=args.only)
    summary = runner.summary()
    print(tabulate([[name, path] for name, path in files.items()], headers=["Output", "Path"], tablefmt="grid"))
    print(f"\nHard failures: {summary['hard_failures']}, soft failures: {summary['soft_failures']}")
    return 1 if summary["hard_failures"] else 0


def cmd_gen_mdp(args) -> int:
    spec = RandomMdpSpec(n_states=args.n_states, n_actions=args.n_actions, gamma=args.gamma, seed=args.seed,
                         reward_scale=args.reward_scale, concentration=args.concentration,
                         max_attempts=args.max_attempts)
    mdp, policy = generate_random_mdp(spec)
    chain = induce_chain(mdp, policy)
    save_mdp_document(args.out, mdp, policy)
    rows = [[s, f"{chain.d[s]:.6f}", f"{chain.v_pi[s]:.6f}"] for s in range(chain.n_states)]
    print(tabulate(rows, headers=["State", "d(s)", "V^pi(s)"], tablefmt="grid"))
    print(f"\nSaved MDP to {args.out} (d_min={chain.d_min:.6g}, R_max={chain.r_max:.6g})")
    return 0


def cmd_demo(args) -> int:
    spec = OffPolicySpec(epsilon=args.epsilon)
    values, prob = forced_sequence(spec, args.streak)
    print(f"Action-1 recursion: V' = {spec.coefficient:.6g} V + {spec.intercept:.6g}")
    print(tabulate([[k, v] for k, v in enumerate(values)], headers=["k", "V_k (forced action 1)"], tablefmt="grid"))
    print(f"Probability of this streak: {prob:.6g}\n")

    demo = sampled_demo(spec, args.runs, args.horizon, args.seed,
                        streak_lengths=range(1, min(args.streak, args.horizon) + 1))
    print(tabulate(demo.streak_frame(), headers="keys", tablefmt="grid", showindex=False))
    print(f"\nMax |V| over {args.runs} runs: {demo.max_abs.max():.6g}; replay gap {demo.replay_gap:.3g}\n")

    grid = sorted(set([0.01, 0.05, 0.09, 0.11, 0.2, 0.5, 0.9, args.epsilon]))
    print(tabulate(threshold_table(grid), headers="keys", tablefmt="grid", showindex=False))
    return 0


def cmd_show(args) -> int:
    summary = ConfigManager.read_json(os.path.join(args.out_dir, "summary.json"))
    header = [[key, summary.get(key)] for key in
              ("name", "schema_version", "seed", "n_states", "alpha", "gamma", "rho", "n_runs", "passed")]
    print(tabulate(header, tablefmt="grid"))
    checks = summary.get("checks", [])
    if not args.all:
        checks = [c for c in checks if not c["passed"]] or checks
    rows = [[c["name"], "hard" if c["hard"] else "soft", "✅" if c["passed"] else "❌", c["detail"]] for c in checks]
    print(tabulate(rows, headers=["Check", "Kind", "Status", "Detail"], tablefmt="grid"))
    return 0 if summary.get("passed") else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="td-lsys", description="Finite-time analysis experiments for tabular TD-learning")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="Run an experiment config")
    run.add_argument("--config", required=True, help="Experiment config (YAML or JSON)")
    run.add_argument("--only", nargs="+", choices=STAGES, help="Run only these stages")
    run.add_argument("--out", help="Output directory (default: <output_dir>/<name>)")
    run.add_argument("--seed", type=int, help="Override the config seed")
    run.add_argument("--workers", type=int, help="Worker threads for the ensemble")
    run.add_argument("--progress", action="store_true", help="Show ensemble progress bars")
    run.set_defaults(func=cmd_run)

    gen = sub.add_parser("gen-mdp", help="Generate a random ergodic MDP document")
    gen.add_argument("--n-states", type=int, required=True)
    gen.add_argument("--n-actions", type=int, default=2)
    gen.add_argument("--gamma", type=float, default=0.9)
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--reward-scale", type=float, default=1.0)
    gen.add_argument("--concentration", type=float, default=1.0)
    gen.add_argument("--max-attempts", type=int, default=100)
    gen.add_argument("--out", required=True, help="Output JSON path")
    gen.set_defaults(func=cmd_gen_mdp)

    demo = sub.add_parser("demo", help="Built-in demonstrations")
    demo_sub = demo.add_subparsers(dest="demo", required=True)
    off = demo_sub.add_parser("off-policy", help="Importance-sampled TD on a single-state MDP")
    off.add_argument("--epsilon", type=float, default=0.5, help="Behavior-policy exploration in (0, 1)")
    off.add_argument("--streak", type=int, default=3, help="Forced action-1 streak length")
    off.add_argument("--runs", type=int, default=100_000)
    off.add_argument("--horizon", type=int, default=20)
    off.add_argument("--seed", type=int, default=0)
    off.set_defaults(func=cmd_demo)

    show = sub.add_parser("show", help="Print summary.json of a finished run")
    show.add_argument("out_dir")
    show.add_argument("--all", action="store_true", help="List passing checks too")
    show.set_defaults(func=cmd_show)
    return parser


def main(argv=None) -> int:
    load_dotenv()
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except Exception as e:
        logger.error(f"Error in {args.command}: {str(e)}")
        return 2


if __name__ == "__main__":
    sys.exit(main())
