"""
Experiment Workflow
The learn / act / relearn outer loop as a LangGraph state graph, single-agent
runs, experiment suites and the CSV / markdown reports they produce
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence, TypedDict

import numpy as np
import pandas as pd
from langgraph.graph import END, StateGraph

import settings
from baselines import (
    BCAgent,
    BeliefSettings,
    PlanningAgent,
    RandomAgent,
    bc_learn,
    direct_llm_agent,
    oracle_agent,
    tabular_agent,
)
from belief_filter import InitFailure, ParticleDepletion
from belief_planner import PlannerConfig
from candidate_tracker import CandidateTracker
from environments import Environment, collect_demos, demo_policy, ground_truth, make_env
from model_learner import LearnConfig, LearnFailure, ModelSet, learn_models
from pomdp_core import COMPONENTS, Dataset, PomdpCoderError, TransitionRecord, derive_seed
from program_proposer import ChatClient, Proposer, make_chat_client, make_proposer

logger = logging.getLogger(__name__)

PHASES = ("offline", "online")


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ExperimentConfig:
    env_id: str
    agent: str = "pomdp-coder"
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    episodes: int = 10
    demo_episodes: int = settings.DEFAULT_DEMO_EPISODES
    gamma: float = settings.DEFAULT_GAMMA
    max_steps: int | None = None
    horizon: int | None = None
    lam: float | None = None
    alpha: float | None = None
    action_cost: float | None = None
    rollouts: int | None = None
    n_particles: int | None = None
    max_rejuvenation: int | None = None
    max_refinements: int = settings.LEARN_DEFAULTS["max_refinements"]
    smoothing: float = settings.LEARN_DEFAULTS["smoothing"]
    k_cov: int = settings.LEARN_DEFAULTS["k_cov"]
    nd: int = settings.LEARN_DEFAULTS["nd"]
    nc: int = settings.LEARN_DEFAULTS["nc"]
    ns: int = settings.LEARN_DEFAULTS["ns"]
    max_sites: int = settings.LEARN_DEFAULTS["max_sites"]
    test_fraction: float = settings.DEFAULT_TEST_FRACTION
    proposer_backend: str = settings.PROPOSER_BACKEND
    fixture: str | None = None
    offline_only: bool = False
    online_only: bool = False
    cache_dir: str | None = None
    trace_path: str | None = None

    def __post_init__(self):
        if not 0 < self.gamma < 1:
            raise ValueError("gamma must lie in (0, 1)")
        if self.episodes <= 0:
            raise ValueError("episodes must be positive")
        if not self.seeds:
            raise ValueError("at least one seed is required")
        if self.offline_only and self.online_only:
            raise ValueError("offline_only and online_only are mutually exclusive")
        family = settings.defaults_for(self.env_id)
        for name in ("max_steps", "horizon", "lam", "alpha", "action_cost", "rollouts",
                     "n_particles", "max_rejuvenation"):
            if getattr(self, name) is None:
                object.__setattr__(self, name, getattr(family, name))

    @classmethod
    def from_sources(cls, env_id: str, agent: str, file_values: dict | None = None,
                     flags: dict | None = None) -> "ExperimentConfig":
        """Family defaults, overridden by config-file values, overridden by flags."""
        merged: dict = {}
        for source in (file_values or {}, flags or {}):
            merged.update({k: v for k, v in source.items() if v is not None})
        merged.pop("env_id", None)
        merged.pop("agent", None)
        known = {f.name: f for f in fields(cls)}
        unknown = sorted(set(merged) - set(known))
        if unknown:
            raise ValueError(f"Unknown config keys: {', '.join(unknown)}")
        values = {k: _coerce(known[k].type, v) for k, v in merged.items()}
        return cls(env_id=env_id, agent=agent, **values)

    def planner_config(self) -> PlannerConfig:
        return PlannerConfig(
            horizon=self.horizon, lam=self.lam, alpha=self.alpha, action_cost=self.action_cost,
            rollouts_per_query=self.rollouts, gamma=self.gamma, trace_path=self.trace_path,
        )

    def belief_settings(self) -> BeliefSettings:
        return BeliefSettings(self.n_particles, self.max_rejuvenation, self.rollouts)

    def learn_config(self) -> LearnConfig:
        return LearnConfig(
            max_refinements=self.max_refinements, smoothing=self.smoothing, k_cov=self.k_cov,
            nd=self.nd, nc=self.nc, ns=self.ns, max_sites=self.max_sites, test_fraction=self.test_fraction,
        )

    @property
    def cache_root(self) -> Path:
        return Path(self.cache_dir) if self.cache_dir else settings.CACHE_DIR


def _coerce(annotation: str, value):
    """Config files and flags arrive as text; convert by the field's annotation."""
    if not isinstance(value, str):
        return tuple(value) if annotation.startswith("tuple") else value
    text = value.strip()
    if annotation.startswith("tuple"):
        return tuple(int(v) for v in text.replace(",", " ").split())
    if annotation.startswith("bool"):
        return text.lower() in ("1", "true", "yes", "on")
    if annotation.startswith("int"):
        return int(text)
    if annotation.startswith("float"):
        return float(text)
    return text


# ---------------------------------------------------------------------------
# Episodes
# ---------------------------------------------------------------------------


@dataclass
class Trajectory:
    records: list[TransitionRecord] = field(default_factory=list)
    error: str | None = None

    @property
    def rewards(self) -> list[float]:
        return [r.reward for r in self.records]


def discounted_return(rewards: Sequence[float], gamma: float) -> float:
    return float(sum(gamma ** t * r for t, r in enumerate(rewards)))


def run_episode(env: Environment, agent, gamma: float, max_steps: int, seed: int) -> tuple[float, Trajectory]:
    """Play one episode; a belief failure ends it with the rewards collected so far."""
    trajectory = Trajectory()
    state, observation = env.reset(seed)
    try:
        agent.begin_episode(observation, seed)
    except (ParticleDepletion, InitFailure) as e:
        logger.warning("⚠️ %s could not start its belief: %s", agent.name, e)
        trajectory.error = str(e)
        return 0.0, trajectory

    for t in range(max_steps):
        action = agent.act(t, state)
        result = env.step(action)
        trajectory.records.append(TransitionRecord(
            episode_id=0,
            step=t,
            state=state,
            action=action,
            observation=result.observation,
            reward=result.reward,
            next_state=result.next_state,
            done=result.done,
        ))
        state = result.next_state
        if result.done:
            break
        try:
            agent.observe(action, result.observation, result.reward)
        except ParticleDepletion as e:
            logger.warning("⚠️ %s lost track of the state at step %d: %s", agent.name, t, e)
            trajectory.error = str(e)
            break
    return discounted_return(trajectory.rewards, gamma), trajectory


@dataclass(frozen=True)
class EpisodeResult:
    env_id: str
    agent: str
    seed: int
    episode: int
    discounted_return: float
    steps: int
    total_reward: float
    done: bool
    error: str | None = None


@dataclass
class RunReport:
    env_id: str
    agent: str
    episodes: list[EpisodeResult] = field(default_factory=list)
    learning: list[dict] = field(default_factory=list)
    wall_clock: float = 0.0
    errors: list[str] = field(default_factory=list)

    @property
    def returns(self) -> np.ndarray:
        return np.array([e.discounted_return for e in self.episodes], dtype=float)

    @property
    def mean(self) -> float:
        return float(self.returns.mean()) if self.episodes else float("nan")

    @property
    def stderr(self) -> float:
        return standard_error(self.returns)

    def normalized(self, oracle_mean: float) -> float:
        return self.mean / oracle_mean if oracle_mean else float("nan")

    def node_table(self) -> pd.DataFrame:
        """Nodes created per seed, as mean and standard error per (phase, component)."""
        return node_table(self.learning, sorted({e.seed for e in self.episodes}))


def standard_error(values) -> float:
    values = np.asarray(values, dtype=float)
    if len(values) < 2:
        return 0.0
    return float(values.std(ddof=1) / math.sqrt(len(values)))


def node_table(learning: list[dict], seeds: Sequence[int]) -> pd.DataFrame:
    rows = []
    for phase in PHASES:
        for component in COMPONENTS:
            per_seed = [
                sum(e["nodes_created"] for e in learning
                    if e["seed"] == s and e["phase"] == phase and e["component"] == component)
                for s in seeds
            ]
            rows.append({
                "phase": phase,
                "component": component,
                "mean_nodes": float(np.mean(per_seed)) if per_seed else 0.0,
                "stderr_nodes": standard_error(per_seed),
            })
    return pd.DataFrame(rows)


# ---------------------------------------------------------------------------
# Outer learning loop (LangGraph)
# ---------------------------------------------------------------------------


class PomdpCoderState(TypedDict):
    cfg: ExperimentConfig
    env: Environment
    seed: int
    proposer: Proposer
    tracker: CandidateTracker
    dataset: Dataset | None
    models: ModelSet | None
    phase: str
    episode: int
    trajectory: Trajectory | None
    results: list[EpisodeResult]
    learning: list[dict]
    error: str | None


def demos_node(state: PomdpCoderState) -> PomdpCoderState:
    """Collect demonstrations, or start from nothing for online-only runs"""
    cfg, env = state["cfg"], state["env"]
    if cfg.online_only:
        logger.info("🔍 Online-only run: starting with an empty dataset")
        state["dataset"] = Dataset(env.schema)
        state["phase"] = "online"
        return state
    try:
        state["dataset"] = collect_demos(env, demo_policy(cfg.env_id), cfg.demo_episodes,
                                         derive_seed(state["seed"], 11), cfg.max_steps)
    except PomdpCoderError as e:
        state["error"] = f"demo collection failed: {e}"
    return state


def learn_node(state: PomdpCoderState) -> PomdpCoderState:
    """Learn or refresh all four models from the dataset"""
    d = state["dataset"]
    if d is None or not len(d):
        return state
    cfg = state["cfg"]
    call_seed = derive_seed(state["seed"], 12, state["episode"])
    try:
        models = learn_models(d, state["models"], cfg.learn_config(), state["proposer"], call_seed,
                              state["tracker"], state["phase"])
    except LearnFailure as e:
        logger.error("❌ Learning failed for %s: %s", e.component, e)
        if state["models"] is None and not cfg.online_only:
            state["error"] = str(e)
        return state
    for component in COMPONENTS:
        s = models.stats.get(component)
        if s is None:
            continue
        state["learning"].append({
            "seed": state["seed"],
            "phase": state["phase"],
            "component": component,
            "episode": state["episode"],
            "nodes_created": s.nodes_created,
            "proposer_calls": s.proposer_calls,
            "coverage_train": s.coverage_train,
            "coverage_test": s.coverage_test,
        })
    state["models"] = models
    return state


def episode_node(state: PomdpCoderState) -> PomdpCoderState:
    """Plan and act for one episode with the current models"""
    cfg, env = state["cfg"], state["env"]
    models = state["models"]
    if models is None:
        agent = RandomAgent(env.n_actions)
    else:
        agent = PlanningAgent(models, cfg.planner_config(), cfg.belief_settings())
    seed = derive_seed(state["seed"], 13, state["episode"])
    ret, trajectory = run_episode(env, agent, cfg.gamma, cfg.max_steps, seed)
    state["results"].append(EpisodeResult(
        env_id=cfg.env_id,
        agent="pomdp-coder",
        seed=state["seed"],
        episode=state["episode"],
        discounted_return=ret,
        steps=len(trajectory.records),
        total_reward=float(sum(trajectory.rewards)),
        done=bool(trajectory.records and trajectory.records[-1].done),
        error=trajectory.error,
    ))
    logger.info("📊 Seed %d episode %d: return %.4f in %d step(s)", state["seed"], state["episode"], ret,
                len(trajectory.records))
    state["trajectory"] = trajectory
    state["episode"] += 1
    return state


def absorb_node(state: PomdpCoderState) -> PomdpCoderState:
    """Append the finished episode, with its true states, to the dataset"""
    trajectory = state["trajectory"]
    if trajectory is not None and trajectory.records:
        state["dataset"] = state["dataset"].append_episode(trajectory.records)
    state["phase"] = "online"
    return state


def after_demos(state: PomdpCoderState) -> str:
    return "end" if state["error"] else "learn"


def after_learn(state: PomdpCoderState) -> str:
    return "end" if state["error"] else "episode"


def after_episode(state: PomdpCoderState) -> str:
    if state["episode"] >= state["cfg"].episodes:
        return "end"
    if state["cfg"].offline_only:
        return "episode"
    return "absorb"


def create_pomdp_coder_workflow():
    workflow = StateGraph(PomdpCoderState)

    workflow.add_node("demos", demos_node)
    workflow.add_node("learn", learn_node)
    workflow.add_node("episode", episode_node)
    workflow.add_node("absorb", absorb_node)

    workflow.set_entry_point("demos")
    workflow.add_conditional_edges("demos", after_demos, {"learn": "learn", "end": END})
    workflow.add_conditional_edges("learn", after_learn, {"episode": "episode", "end": END})
    workflow.add_conditional_edges("episode", after_episode, {"episode": "episode", "absorb": "absorb", "end": END})
    workflow.add_edge("absorb", "learn")

    return workflow.compile()


def tracker_for(cfg: ExperimentConfig, seed: int) -> CandidateTracker:
    return CandidateTracker(f"{cfg.env_id}/seed-{seed}", root=cfg.cache_root)


def run_pomdp_coder(cfg: ExperimentConfig, proposer: Proposer | None = None) -> RunReport:
    """Learn from demos, then act and relearn after every episode, for each seed."""
    report = RunReport(cfg.env_id, "pomdp-coder")
    started = time.perf_counter()
    app = create_pomdp_coder_workflow()
    for seed in cfg.seeds:
        tracker = tracker_for(cfg, seed)
        seed_proposer = proposer or make_proposer(
            cfg.proposer_backend,
            fixture=cfg.fixture,
            models=ground_truth(cfg.env_id) if cfg.proposer_backend == "scripted" else None,
            tracker=tracker,
        )
        initial_state: PomdpCoderState = {
            "cfg": cfg,
            "env": make_env(cfg.env_id),
            "seed": seed,
            "proposer": seed_proposer,
            "tracker": tracker,
            "dataset": None,
            "models": None,
            "phase": "offline",
            "episode": 0,
            "trajectory": None,
            "results": [],
            "learning": [],
            "error": None,
        }
        logger.info("🔍 POMDP-Coder on %s, seed %d", cfg.env_id, seed)
        final = app.invoke(initial_state, config={"recursion_limit": 4 * cfg.episodes + 20})
        report.episodes.extend(final["results"])
        report.learning.extend(final["learning"])
        if final["error"]:
            logger.error("❌ Seed %d stopped: %s", seed, final["error"])
            report.errors.append(f"seed {seed}: {final['error']}")
    report.wall_clock = time.perf_counter() - started
    return report


# ---------------------------------------------------------------------------
# Single agents
# ---------------------------------------------------------------------------


def make_agent(cfg: ExperimentConfig, env: Environment, demos: Dataset, seed: int,
               chat_client: ChatClient | None = None):
    if cfg.agent == "random":
        return RandomAgent(env.n_actions, seed)
    if cfg.agent == "oracle":
        return oracle_agent(env, cfg.planner_config(), cfg.belief_settings())
    if cfg.agent == "tabular":
        return tabular_agent(demos, cfg.planner_config(), cfg.belief_settings())
    if cfg.agent == "bc":
        return BCAgent(bc_learn(demos))
    if cfg.agent == "direct-llm":
        return direct_llm_agent(chat_client or make_chat_client(cfg.proposer_backend), env.schema, demos)
    raise ValueError(f"Unknown agent '{cfg.agent}'")


def run_agent(cfg: ExperimentConfig, proposer: Proposer | None = None,
              chat_client: ChatClient | None = None) -> RunReport:
    """Run one agent on one environment over every configured seed."""
    if cfg.agent == "pomdp-coder":
        return run_pomdp_coder(cfg, proposer)
    report = RunReport(cfg.env_id, cfg.agent)
    started = time.perf_counter()
    for seed in cfg.seeds:
        env = make_env(cfg.env_id)
        needs_demos = cfg.agent in ("tabular", "bc", "direct-llm")
        demos = (collect_demos(env, demo_policy(cfg.env_id), cfg.demo_episodes, derive_seed(seed, 11), cfg.max_steps)
                 if needs_demos else Dataset(env.schema))
        agent = make_agent(cfg, env, demos, seed, chat_client)
        for e in range(cfg.episodes):
            ret, trajectory = run_episode(env, agent, cfg.gamma, cfg.max_steps, derive_seed(seed, 13, e))
            report.episodes.append(EpisodeResult(
                env_id=cfg.env_id,
                agent=cfg.agent,
                seed=seed,
                episode=e,
                discounted_return=ret,
                steps=len(trajectory.records),
                total_reward=float(sum(trajectory.rewards)),
                done=bool(trajectory.records and trajectory.records[-1].done),
                error=trajectory.error,
            ))
        logger.info("📊 %s on %s seed %d: mean return %.4f", cfg.agent, cfg.env_id, seed,
                    np.mean([r.discounted_return for r in report.episodes if r.seed == seed]))
    report.wall_clock = time.perf_counter() - started
    return report


# ---------------------------------------------------------------------------
# Suites and reports
# ---------------------------------------------------------------------------


@dataclass
class SuiteResult:
    results: pd.DataFrame
    episodes: pd.DataFrame
    learning: pd.DataFrame
    paths: dict[str, Path]


RESULT_COLUMNS = ["env", "agent", "seed", "episodes", "mean_return", "stderr", "error"]
EPISODE_COLUMNS = ["env", "agent", "seed", "episode", "discounted_return", "steps", "total_reward", "done", "error"]
LEARNING_COLUMNS = ["env", "seed", "phase", "component", "episode", "nodes_created", "proposer_calls",
                    "coverage_train", "coverage_test"]


def suite_configs(env_ids: Sequence[str], agents: Sequence[str], **overrides) -> list[ExperimentConfig]:
    return [ExperimentConfig(env_id=e, agent=a, **overrides) for e in env_ids for a in agents]


def run_suite(configs: Sequence[ExperimentConfig], output_dir: str | Path,
              proposer_factory=None, chat_client: ChatClient | None = None) -> SuiteResult:
    """Run every (environment, agent) cell; a failing cell is recorded and the suite moves on."""
    result_rows, episode_rows, learning_rows, timing_rows = [], [], [], []
    for cfg in configs:
        logger.info("🔍 Suite cell %s / %s", cfg.env_id, cfg.agent)
        try:
            proposer = proposer_factory(cfg) if proposer_factory else None
            report = run_agent(cfg, proposer, chat_client)
        except (PomdpCoderError, ValueError) as e:
            logger.error("❌ Suite cell %s / %s failed: %s", cfg.env_id, cfg.agent, e)
            for seed in cfg.seeds:
                result_rows.append({"env": cfg.env_id, "agent": cfg.agent, "seed": seed, "episodes": 0,
                                    "mean_return": float("nan"), "stderr": float("nan"), "error": str(e)})
            continue
        for seed in cfg.seeds:
            seed_results = [r for r in report.episodes if r.seed == seed]
            returns = [r.discounted_return for r in seed_results]
            errors = [r.error for r in seed_results if r.error]
            seed_errors = [m for m in report.errors if m.startswith(f"seed {seed}:")]
            result_rows.append({
                "env": cfg.env_id,
                "agent": cfg.agent,
                "seed": seed,
                "episodes": len(returns),
                "mean_return": float(np.mean(returns)) if returns else float("nan"),
                "stderr": standard_error(returns),
                "error": "; ".join(seed_errors + errors[:1]),
            })
        for r in report.episodes:
            row = asdict(r)
            row["env"] = row.pop("env_id")
            episode_rows.append({k: row[k] for k in EPISODE_COLUMNS})
        for entry in report.learning:
            learning_rows.append({"env": cfg.env_id, **{k: entry[k] for k in LEARNING_COLUMNS if k != "env"}})
        timing_rows.append({"env": cfg.env_id, "agent": cfg.agent, "wall_clock_s": report.wall_clock})

    results = pd.DataFrame(result_rows, columns=RESULT_COLUMNS)
    episodes = pd.DataFrame(episode_rows, columns=EPISODE_COLUMNS)
    learning = pd.DataFrame(learning_rows, columns=LEARNING_COLUMNS)
    out = Path(output_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "results": out / "results.csv",
        "episodes": out / "episodes.csv",
        "learning_stats": out / "learning_stats.csv",
        "timings": out / "timings.csv",
    }
    results.to_csv(paths["results"], index=False)
    episodes.to_csv(paths["episodes"], index=False)
    learning.to_csv(paths["learning_stats"], index=False)
    pd.DataFrame(timing_rows, columns=["env", "agent", "wall_clock_s"]).to_csv(paths["timings"], index=False)
    paths.update(emit_reports(episodes, learning, out))
    logger.info("✅ Suite written to %s", out)
    return SuiteResult(results, episodes, learning, paths)


def summarize(episodes: pd.DataFrame) -> pd.DataFrame:
    """Mean and standard error per (env, agent), normalized by the oracle's mean."""
    rows = []
    for (env, agent), group in episodes.groupby(["env", "agent"], sort=True):
        returns = group["discounted_return"].astype(float).to_numpy()
        rows.append({"env": env, "agent": agent, "episodes": len(returns),
                     "mean": float(returns.mean()), "stderr": standard_error(returns)})
    summary = pd.DataFrame(rows, columns=["env", "agent", "episodes", "mean", "stderr"])
    oracle = summary[summary["agent"] == "oracle"].set_index("env")["mean"]
    scale = summary["env"].map(oracle)
    scale = scale.where(scale.notna() & (scale != 0))
    summary["normalized_mean"] = summary["mean"] / scale
    summary["normalized_stderr"] = summary["stderr"] / scale.abs()
    return summary


def markdown_table(df: pd.DataFrame) -> str:
    def cell(v) -> str:
        if isinstance(v, float):
            return "n/a" if math.isnan(v) else f"{v:.3f}"
        return str(v)

    lines = ["| " + " | ".join(df.columns) + " |", "|" + "---|" * len(df.columns)]
    for row in df.itertuples(index=False):
        lines.append("| " + " | ".join(cell(v) for v in row) + " |")
    return "\n".join(lines)


def emit_reports(episodes: pd.DataFrame, learning: pd.DataFrame, output_dir: str | Path) -> dict[str, Path]:
    """results.md and normalized.csv from episode-level results."""
    out = Path(output_dir)
    out.mkdir(parents=True, exist_ok=True)
    summary = summarize(episodes)
    normalized_path = out / "normalized.csv"
    summary[["env", "agent", "normalized_mean", "normalized_stderr"]].to_csv(normalized_path, index=False)

    sections = ["# Results", "", "Discounted return per environment and agent.", "", markdown_table(summary)]
    if len(learning):
        for env, group in learning.groupby("env", sort=True):
            seeds = sorted(group["seed"].unique().tolist())
            table = node_table(group.to_dict("records"), seeds)
            sections += ["", f"## Nodes created on {env}", "", markdown_table(table)]
    markdown_path = out / "results.md"
    markdown_path.write_text("\n".join(sections) + "\n", encoding="utf-8")
    return {"markdown": markdown_path, "normalized": normalized_path}


def report_from_directory(output_dir: str | Path) -> dict[str, Path]:
    """Regenerate the markdown and normalized tables from a finished suite."""
    out = Path(output_dir)
    episodes_path = out / "episodes.csv"
    if not episodes_path.exists():
        raise FileNotFoundError(f"No episodes.csv in {out}")
    episodes = pd.read_csv(episodes_path)
    learning_path = out / "learning_stats.csv"
    learning = pd.read_csv(learning_path) if learning_path.exists() else pd.DataFrame(columns=LEARNING_COLUMNS)
    return emit_reports(episodes, learning, out)
