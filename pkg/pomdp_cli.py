"""
POMDP Model Induction CLI
Collect demonstrations, learn model programs, run agents and suites, and emit reports
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import settings
from baselines import AGENT_IDS
from candidate_tracker import CandidateTracker
from environments import ENV_IDS, collect_demos, demo_policy, ground_truth, make_env
from experiment_workflow import ExperimentConfig, report_from_directory, run_suite
from model_learner import LearnConfig, LearnFailure, learn_models
from pomdp_core import COMPONENTS, PomdpCoderError, load_dataset, save_dataset
from pps_parser import save_program
from program_proposer import make_proposer

logger = logging.getLogger(__name__)

BACKENDS = ("http", "vertex", "scripted")

# argparse dest -> ExperimentConfig field
CONFIG_FLAGS = {
    "episodes": "episodes",
    "demo_episodes": "demo_episodes",
    "gamma": "gamma",
    "max_steps": "max_steps",
    "horizon": "horizon",
    "lam": "lam",
    "alpha": "alpha",
    "action_cost": "action_cost",
    "rollouts": "rollouts",
    "particles": "n_particles",
    "max_rejuvenation": "max_rejuvenation",
    "max_refinements": "max_refinements",
    "backend": "proposer_backend",
    "fixture": "fixture",
    "cache_dir": "cache_dir",
    "trace": "trace_path",
}


def _add_experiment_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seeds", type=int, nargs="+", help="learning / evaluation seeds")
    p.add_argument("--episodes", type=int)
    p.add_argument("--demo-episodes", type=int)
    p.add_argument("--gamma", type=float)
    p.add_argument("--max-steps", type=int)
    p.add_argument("--horizon", type=int, help="planner expansion budget")
    p.add_argument("--lam", type=float, help="weight on -log p of a branch")
    p.add_argument("--alpha", type=float, help="weight on belief entropy")
    p.add_argument("--action-cost", type=float)
    p.add_argument("--rollouts", type=int)
    p.add_argument("--particles", type=int)
    p.add_argument("--max-rejuvenation", type=int)
    p.add_argument("--max-refinements", type=int)
    p.add_argument("--backend", choices=BACKENDS)
    p.add_argument("--fixture", help="directory of scripted programs: <dir>/<component>/*.pps")
    p.add_argument("--cache-dir")
    p.add_argument("--trace", help="append planner search traces to this JSONL file")
    p.add_argument("--config", help="flat KEY=value experiment config file")
    p.add_argument("--offline-only", action="store_true", help="never relearn after an episode")
    p.add_argument("--online-only", action="store_true", help="start from an empty dataset")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pomdp_cli", description="Learn POMDP models as probabilistic programs")
    parser.add_argument("--log-level", default=None)
    sub = parser.add_subparsers(dest="command", required=True)

    demo = sub.add_parser("demo", help="collect scripted demonstrations to JSONL")
    demo.add_argument("--env", required=True, choices=ENV_IDS)
    demo.add_argument("--episodes", type=int, default=settings.DEFAULT_DEMO_EPISODES)
    demo.add_argument("--seed", type=int, default=0)
    demo.add_argument("--out", required=True)

    learn = sub.add_parser("learn", help="learn all four models offline")
    learn.add_argument("--env", required=True, choices=ENV_IDS)
    learn.add_argument("--demos", help="JSONL dataset; collected fresh when omitted")
    learn.add_argument("--seed", type=int, default=0)
    learn.add_argument("--backend", choices=BACKENDS)
    learn.add_argument("--fixture")
    learn.add_argument("--cache-dir")
    learn.add_argument("--max-refinements", type=int, default=settings.LEARN_DEFAULTS["max_refinements"])
    learn.add_argument("--out", help="write the selected programs into this directory")

    run = sub.add_parser("run", help="run one agent on one environment")
    run.add_argument("--env", required=True, choices=ENV_IDS)
    run.add_argument("--agent", required=True, choices=AGENT_IDS)
    run.add_argument("--out", default="results")
    _add_experiment_flags(run)

    suite = sub.add_parser("suite", help="run every (environment, agent) pair")
    suite.add_argument("--envs", nargs="+", default=list(ENV_IDS), choices=ENV_IDS)
    suite.add_argument("--agents", nargs="+", default=list(AGENT_IDS), choices=AGENT_IDS)
    suite.add_argument("--out", default="results")
    _add_experiment_flags(suite)

    report = sub.add_parser("report", help="regenerate markdown and normalized tables")
    report.add_argument("--dir", default="results")
    return parser


def config_for(args: argparse.Namespace, env_id: str, agent: str) -> ExperimentConfig:
    """Family defaults < config file < command-line flags."""
    file_values = settings.load_config_file(args.config) if args.config else {}
    flags = {field: getattr(args, dest) for dest, field in CONFIG_FLAGS.items()}
    flags["seeds"] = tuple(args.seeds) if args.seeds else None
    flags["offline_only"] = True if args.offline_only else None
    flags["online_only"] = True if args.online_only else None
    return ExperimentConfig.from_sources(env_id, agent, file_values, flags)


def cmd_demo(args) -> int:
    env = make_env(args.env)
    d = collect_demos(env, demo_policy(args.env), args.episodes, args.seed)
    path = save_dataset(d, args.out)
    print(f"✅ Saved {len(d.episode_ids)} episode(s), {len(d)} transition(s) to {path}")
    return 0


def cmd_learn(args) -> int:
    if args.demos:
        d = load_dataset(args.demos)
    else:
        d = collect_demos(make_env(args.env), demo_policy(args.env), settings.DEFAULT_DEMO_EPISODES, args.seed)
    root = Path(args.cache_dir) if args.cache_dir else settings.CACHE_DIR
    tracker = CandidateTracker(args.env, root=root)
    backend = args.backend or settings.PROPOSER_BACKEND
    proposer = make_proposer(
        backend,
        fixture=args.fixture,
        models=ground_truth(args.env) if backend == "scripted" and not args.fixture else None,
        tracker=tracker,
    )
    models = learn_models(d, None, LearnConfig(max_refinements=args.max_refinements), proposer,
                          args.seed, tracker, "offline")

    print("\n📊 Learned models:")
    for component in COMPONENTS:
        stats = models.stats[component]
        print(f"  - {component}: node {models.provenance[component].node_id}, "
              f"coverage train {stats.coverage_train:.3f} / test {stats.coverage_test:.3f}, "
              f"{stats.nodes_created} node(s), {stats.proposer_calls} proposer call(s)")
    if args.out:
        for component in COMPONENTS:
            save_program(models.program(component), Path(args.out) / f"{component}.pps")
        print(f"✅ Programs written to {args.out}")
    return 0


def _run_configs(configs: list[ExperimentConfig], out: str) -> int:
    print("=" * 60)
    print(f"🚀 Running {len(configs)} cell(s)")
    print("=" * 60)
    result = run_suite(configs, out)

    print("\n" + "=" * 60)
    print("✅ Run Complete")
    print("=" * 60)
    print("\n📊 Summary:")
    for row in result.results.itertuples(index=False):
        line = f"  - {row.env} / {row.agent} seed {row.seed}: {row.mean_return:.4f} ± {row.stderr:.4f}"
        if isinstance(row.error, str) and row.error:
            line += f" ⚠️ {row.error}"
        print(line)
    print(f"\n📁 Reports written to {out}")
    return 0


def cmd_run(args) -> int:
    return _run_configs([config_for(args, args.env, args.agent)], args.out)


def cmd_suite(args) -> int:
    configs = [config_for(args, env_id, agent) for env_id in args.envs for agent in args.agents]
    return _run_configs(configs, args.out)


def cmd_report(args) -> int:
    for name, path in report_from_directory(args.dir).items():
        print(f"✅ {name}: {path}")
    return 0


COMMANDS = {"demo": cmd_demo, "learn": cmd_learn, "run": cmd_run, "suite": cmd_suite, "report": cmd_report}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    settings.configure_logging(args.log_level)
    try:
        return COMMANDS[args.command](args)
    except (PomdpCoderError, LearnFailure, FileNotFoundError, ValueError) as e:
        print(f"\n❌ {args.command} failed: {e}")
        return 1


if __name__ == "__main__":
    sys.exit(main())
