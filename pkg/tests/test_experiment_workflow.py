import math

import numpy as np
import pandas as pd
import pytest

from baselines import BeliefSettings, RandomAgent, oracle_agent, tabular_agent
from belief_filter import InitFailure
from belief_planner import PlannerConfig
from environments import collect_demos, make_env
from experiment_workflow import (
    EPISODE_COLUMNS,
    RESULT_COLUMNS,
    ExperimentConfig,
    after_episode,
    create_pomdp_coder_workflow,
    discounted_return,
    markdown_table,
    node_table,
    report_from_directory,
    run_agent,
    run_episode,
    run_suite,
    standard_error,
    summarize,
)
from oracles import minigrid_empty_optimum
from program_proposer import ScriptedProposer

SMALL = dict(seeds=(0,), episodes=2, max_steps=8, horizon=20, rollouts=2, n_particles=20, max_rejuvenation=500)


class FailingStart:
    name = "failing"

    def begin_episode(self, observation, seed):
        raise InitFailure(["ZeroDivisionError: division by zero"])


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------


def test_family_defaults_fill_unset_fields():
    assert ExperimentConfig("tiger").max_steps == 30
    assert ExperimentConfig("tiger").n_particles == 50
    assert ExperimentConfig("minigrid-empty").horizon == 5000
    assert ExperimentConfig("minigrid-empty", max_steps=7).max_steps == 7


def test_flags_override_config_file_values():
    cfg = ExperimentConfig.from_sources(
        "tiger", "random",
        file_values={"episodes": "3", "gamma": "0.9", "seeds": "1, 2", "offline_only": "true"},
        flags={"episodes": 5, "gamma": None},
    )
    assert cfg.episodes == 5
    assert cfg.gamma == 0.9
    assert cfg.seeds == (1, 2)
    assert cfg.offline_only is True
    assert cfg.agent == "random"


def test_unknown_config_keys_are_rejected():
    with pytest.raises(ValueError, match="warp_speed"):
        ExperimentConfig.from_sources("tiger", "random", {"warp_speed": "9"})


def test_config_validation():
    with pytest.raises(ValueError):
        ExperimentConfig("tiger", gamma=1.0)
    with pytest.raises(ValueError):
        ExperimentConfig("tiger", episodes=0)
    with pytest.raises(ValueError):
        ExperimentConfig("tiger", seeds=())
    with pytest.raises(ValueError):
        ExperimentConfig("tiger", offline_only=True, online_only=True)


def test_derived_configs_carry_the_overrides():
    cfg = ExperimentConfig("tiger", **SMALL)
    assert cfg.planner_config().horizon == 20
    assert cfg.planner_config().rollouts_per_query == 2
    assert cfg.belief_settings().n_particles == 20
    assert cfg.learn_config().max_refinements == 25


# ---------------------------------------------------------------------------
# Episodes and statistics
# ---------------------------------------------------------------------------


def test_discounted_return():
    assert discounted_return([1.0, 1.0, 1.0], 0.5) == pytest.approx(1.75)
    assert discounted_return([], 0.9) == 0.0
    assert discounted_return([0.0] * 8 + [1.0], 0.98) == pytest.approx(0.98 ** 8)
    assert discounted_return([1.0], 0.98) == 1.0


def test_run_episode_with_random_agent():
    env = make_env("tiger")
    ret, trajectory = run_episode(env, RandomAgent(3), 0.98, 30, seed=4)
    assert ret == pytest.approx(discounted_return(trajectory.rewards, 0.98))
    assert [r.step for r in trajectory.records] == list(range(len(trajectory.records)))
    assert trajectory.records[-1].done or len(trajectory.records) == 30
    assert trajectory.error is None


def test_run_episode_is_deterministic():
    first = run_episode(make_env("tiger"), RandomAgent(3), 0.98, 30, seed=9)[0]
    assert run_episode(make_env("tiger"), RandomAgent(3), 0.98, 30, seed=9)[0] == first


def test_run_episode_records_a_failed_start():
    ret, trajectory = run_episode(make_env("tiger"), FailingStart(), 0.98, 30, seed=0)
    assert ret == 0.0
    assert trajectory.records == []
    assert "initial model produced no valid state" in trajectory.error


def test_standard_error():
    assert standard_error([1.0]) == 0.0
    assert standard_error([1.0, 3.0]) == pytest.approx(1.0)


def test_summarize_normalizes_by_oracle_mean():
    episodes = pd.DataFrame({
        "env": ["tiger"] * 4 + ["rocksample-4-4"] * 2,
        "agent": ["oracle", "oracle", "random", "random", "random", "random"],
        "discounted_return": [2.0, 2.0, 1.0, 1.0, 3.0, 5.0],
    })
    summary = summarize(episodes).set_index(["env", "agent"])
    assert summary.loc[("tiger", "random"), "normalized_mean"] == pytest.approx(0.5)
    assert summary.loc[("tiger", "oracle"), "normalized_mean"] == pytest.approx(1.0)
    assert math.isnan(summary.loc[("rocksample-4-4", "random"), "normalized_mean"])
    assert summary.loc[("rocksample-4-4", "random"), "mean"] == pytest.approx(4.0)


def test_markdown_table():
    df = pd.DataFrame({"agent": ["random", "bc"], "mean": [1.23456, float("nan")]})
    lines = markdown_table(df).splitlines()
    assert lines[0] == "| agent | mean |"
    assert lines[1] == "|---|---|"
    assert lines[2] == "| random | 1.235 |"
    assert lines[3] == "| bc | n/a |"


def test_node_table_averages_over_seeds():
    learning = [
        {"seed": 0, "phase": "offline", "component": "reward", "nodes_created": 2},
        {"seed": 1, "phase": "offline", "component": "reward", "nodes_created": 4},
        {"seed": 1, "phase": "online", "component": "reward", "nodes_created": 1},
    ]
    table = node_table(learning, [0, 1]).set_index(["phase", "component"])
    assert table.loc[("offline", "reward"), "mean_nodes"] == pytest.approx(3.0)
    assert table.loc[("offline", "reward"), "stderr_nodes"] == pytest.approx(1.0)
    assert table.loc[("online", "reward"), "mean_nodes"] == pytest.approx(0.5)
    assert table.loc[("offline", "initial"), "mean_nodes"] == 0.0
    assert len(table) == 8


# ---------------------------------------------------------------------------
# Outer loop
# ---------------------------------------------------------------------------


def test_after_episode_routing():
    cfg = ExperimentConfig("tiger", episodes=2)
    assert after_episode({"cfg": cfg, "episode": 1}) == "absorb"
    assert after_episode({"cfg": cfg, "episode": 2}) == "end"
    offline = ExperimentConfig("tiger", episodes=2, offline_only=True)
    assert after_episode({"cfg": offline, "episode": 1}) == "episode"


def test_workflow_compiles():
    assert create_pomdp_coder_workflow() is not None


@pytest.mark.slow
def test_pomdp_coder_learns_then_relearns_online(tmp_path, tiger_models):
    cfg = ExperimentConfig("tiger", "pomdp-coder", cache_dir=str(tmp_path / "cache"), **SMALL)
    report = run_agent(cfg, proposer=ScriptedProposer.from_models(tiger_models))
    assert len(report.episodes) == 2
    assert report.errors == []
    phases = {(e["phase"], e["component"]) for e in report.learning}
    assert ("offline", "transition") in phases
    assert ("online", "transition") in phases
    # the online pass starts from programs that already cover everything
    assert all(e["proposer_calls"] == 0 for e in report.learning if e["phase"] == "online")
    assert (tmp_path / "cache" / "tiger" / "seed-0" / "learning_log.jsonl").exists()


@pytest.mark.slow
def test_online_only_run_starts_without_demonstrations(tmp_path, tiger_models):
    cfg = ExperimentConfig("tiger", "pomdp-coder", online_only=True, cache_dir=str(tmp_path / "cache"), **SMALL)
    report = run_agent(cfg, proposer=ScriptedProposer.from_models(tiger_models))
    assert len(report.episodes) == 2
    assert {e["phase"] for e in report.learning} == {"online"}


@pytest.mark.slow
def test_offline_only_run_never_relearns(tmp_path, tiger_models):
    cfg = ExperimentConfig("tiger", "pomdp-coder", offline_only=True, cache_dir=str(tmp_path / "cache"), **SMALL)
    report = run_agent(cfg, proposer=ScriptedProposer.from_models(tiger_models))
    assert len(report.episodes) == 2
    assert {e["phase"] for e in report.learning} == {"offline"}
    nodes = report.node_table().set_index(["phase", "component"])
    assert (nodes.loc["online", "mean_nodes"] == 0).all()


# ---------------------------------------------------------------------------
# Suites and reports
# ---------------------------------------------------------------------------


def test_suite_writes_every_report(tmp_path):
    configs = [ExperimentConfig("tiger", agent, **SMALL) for agent in ("random", "bc")]
    result = run_suite(configs, tmp_path / "out")
    for name in ("results.csv", "episodes.csv", "learning_stats.csv", "timings.csv", "normalized.csv", "results.md"):
        assert (tmp_path / "out" / name).exists()
    assert list(result.results.columns) == RESULT_COLUMNS
    assert list(result.episodes.columns) == EPISODE_COLUMNS
    assert len(result.results) == 2
    assert len(result.episodes) == 4
    markdown = (tmp_path / "out" / "results.md").read_text()
    assert markdown.startswith("# Results")
    assert "| tiger | random |" in markdown


def test_suite_results_are_reproducible(tmp_path):
    configs = [ExperimentConfig("tiger", "random", **SMALL)]
    run_suite(configs, tmp_path / "a")
    run_suite(configs, tmp_path / "b")
    assert (tmp_path / "a" / "results.csv").read_text() == (tmp_path / "b" / "results.csv").read_text()
    assert (tmp_path / "a" / "episodes.csv").read_text() == (tmp_path / "b" / "episodes.csv").read_text()


@pytest.mark.slow
def test_scripted_pomdp_coder_suite_is_reproducible(tmp_path, tiger_models):
    outputs = []
    for run in ("a", "b"):
        configs = [ExperimentConfig("tiger", agent, cache_dir=str(tmp_path / run / "cache"), **SMALL)
                   for agent in ("pomdp-coder", "random")]
        run_suite(configs, tmp_path / run / "out",
                  proposer_factory=lambda cfg: ScriptedProposer.from_models(tiger_models))
        outputs.append({name: (tmp_path / run / "out" / name).read_text()
                        for name in ("results.csv", "episodes.csv", "learning_stats.csv")})
    assert outputs[0] == outputs[1]
    assert "pomdp-coder" in outputs[0]["episodes.csv"]
    assert len(outputs[0]["learning_stats.csv"].splitlines()) > 1


def test_suite_records_a_failing_cell_and_moves_on(tmp_path):
    configs = [ExperimentConfig("tiger", "chess-engine", **SMALL), ExperimentConfig("tiger", "random", **SMALL)]
    result = run_suite(configs, tmp_path / "out")
    failed = result.results[result.results["agent"] == "chess-engine"].iloc[0]
    assert "Unknown agent" in failed["error"]
    assert math.isnan(failed["mean_return"])
    assert (result.results["agent"] == "random").sum() == 1


@pytest.mark.slow
def test_suite_with_oracle_normalizes(tmp_path):
    configs = [ExperimentConfig("tiger", agent, **SMALL) for agent in ("oracle", "random")]
    run_suite(configs, tmp_path / "out")
    normalized = pd.read_csv(tmp_path / "out" / "normalized.csv").set_index("agent")
    assert normalized.loc["oracle", "normalized_mean"] == pytest.approx(1.0)


def test_report_from_directory(tmp_path):
    run_suite([ExperimentConfig("tiger", "random", **SMALL)], tmp_path / "out")
    (tmp_path / "out" / "results.md").unlink()
    paths = report_from_directory(tmp_path / "out")
    assert paths["markdown"].exists()
    assert paths["normalized"].exists()
    with pytest.raises(FileNotFoundError):
        report_from_directory(tmp_path / "missing")


# ---------------------------------------------------------------------------
# End-to-end agent behaviour
# ---------------------------------------------------------------------------


@pytest.mark.slow
def test_oracle_walks_shortest_paths_on_minigrid_empty():
    env = make_env("minigrid-empty")
    cfg = ExperimentConfig("minigrid-empty", "oracle", horizon=5000, lam=0.1, alpha=0.0, action_cost=0.01)
    agent = oracle_agent(env, cfg.planner_config(), cfg.belief_settings())
    optimal = 0
    for seed in range(10):
        ret, trajectory = run_episode(env, agent, 0.98, cfg.max_steps, seed)
        assert ret == pytest.approx(sum(0.98 ** t * r for t, r in enumerate(trajectory.rewards)), abs=1e-12)
        if trajectory.records[-1].done and len(trajectory.records) == minigrid_empty_optimum():
            optimal += 1
    assert optimal >= 9


@pytest.mark.slow
def test_tiger_baseline_ordering():
    env = make_env("tiger")
    rng = np.random.default_rng(0)
    data = collect_demos(env, lambda state, step: int(rng.integers(3)), 800, 0)
    assert len(data) >= 1000
    planner = PlannerConfig(horizon=20, rollouts_per_query=2)
    belief = BeliefSettings(n_particles=30, max_rejuvenation=2000)
    agents = {
        "oracle": oracle_agent(env, planner, belief),
        "tabular": tabular_agent(data, planner, belief),
        "random": RandomAgent(3),
    }
    returns = {name: [run_episode(env, agent, 0.98, 30, seed)[0] for seed in range(100)]
               for name, agent in agents.items()}
    mean = {name: float(np.mean(r)) for name, r in returns.items()}
    se = {name: standard_error(r) for name, r in returns.items()}

    tabular_gap = 2 * math.hypot(se["tabular"], se["random"])
    assert mean["tabular"] > mean["random"] + tabular_gap
    assert mean["oracle"] >= mean["tabular"] - 2 * math.hypot(se["oracle"], se["tabular"])
    assert mean["oracle"] > mean["random"] + 2 * math.hypot(se["oracle"], se["random"])
