import pytest

from candidate_tracker import CandidateTracker, learn_invocations, node_counts
from conftest import tiger_demos, tiger_state
from environments import ENV_IDS, collect_demos, demo_policy, ground_truth, make_env
from model_learner import (
    CandidateNode,
    LearnConfig,
    LearnFailure,
    ModelSet,
    Pair,
    build_error_block,
    coverage,
    eval_model,
    extract_pairs,
    learn_component,
    learn_model,
    learn_models,
    refine_node,
    render_condition,
    render_outcome,
    root_node,
    split_node,
    thompson_select,
)
from pomdp_core import COMPONENTS, NO_ACTION, reward_value
from pps_parser import PpsTypeError, parse
from program_proposer import ScriptedProposer

FLIP_ALWAYS = """
def transition_func(state, action):
    state.tiger_location = 1 - state.tiger_location
    return state
"""

FLIP_ON_OPEN = """
def transition_func(state, action):
    if action != Action.LISTEN:
        state.tiger_location = 1 - state.tiger_location
    return state
"""

STAY = """
def transition_func(state, action):
    return state
"""


def transition(source, schema):
    return parse(source, "transition", schema)


def test_extract_pairs_per_component(tiger_dataset):
    assert len(extract_pairs(tiger_dataset, "initial")) == len(tiger_dataset.episode_ids)
    transitions = extract_pairs(tiger_dataset, "transition")
    assert len(transitions) == len(tiger_dataset)
    first = tiger_dataset.records[0]
    assert transitions[0] == Pair((first.state, first.action), first.next_state)
    rewards = extract_pairs(tiger_dataset, "reward")
    assert rewards[0].outcome == reward_value(first.reward, first.done)
    with pytest.raises(ValueError):
        extract_pairs(tiger_dataset, "policy")


def test_coverage_of_ground_truth_is_full(tiger_dataset, tiger_models):
    for component in COMPONENTS:
        result = coverage(tiger_models.program(component), extract_pairs(tiger_dataset, component))
        assert result.score == 1.0
        assert result.errors == []


def test_coverage_counts_uncovered_pairs(tiger_dataset, tiger_schema):
    pairs = extract_pairs(tiger_dataset, "transition")
    assert coverage(transition(FLIP_ALWAYS, tiger_schema), pairs).score == 0.0
    opens = sum(1 for p in pairs if p.inputs[1] != 2)
    partial = coverage(transition(FLIP_ON_OPEN, tiger_schema), pairs)
    assert partial.score == pytest.approx(1 - opens / len(pairs))
    assert len(partial.errors) == opens


def test_coverage_of_unparseable_program(tiger_dataset):
    error = PpsTypeError("unknown name 'x'")
    result = coverage(error, extract_pairs(tiger_dataset, "transition"))
    assert result.score == 0.0
    assert result.messages == ["PpsTypeError: unknown name 'x'"]


def test_coverage_of_no_pairs_is_full(tiger_schema):
    assert coverage(transition(STAY, tiger_schema), []).score == 1.0


def test_coverage_falls_back_to_sampling(tiger_dataset, tiger_schema):
    source = """
def transition_func(state, action):
    a = sample("a", Bernoulli(0.5))
    b = sample("b", Bernoulli(0.5))
    c = sample("c", Bernoulli(0.5))
    return state
"""
    pairs = extract_pairs(tiger_dataset, "transition")
    assert coverage(transition(source, tiger_schema), pairs, k=5, max_sites=2).score == 1.0


def test_reward_coverage_uses_tolerance(tiger_schema):
    program = parse("def reward_func(state, action, next_state):\n    return (-1.0000000001, False)\n",
                    "reward", tiger_schema)
    pair = Pair((tiger_state(0), 2, tiger_state(0)), reward_value(-1.0, False))
    assert coverage(program, [pair]).score == 1.0


def test_eval_model_pools_train_and_test(tiger_dataset, tiger_schema):
    pairs = extract_pairs(tiger_dataset, "transition")
    train, test = pairs[:20], pairs[20:]
    evaluation = eval_model(transition(FLIP_ON_OPEN, tiger_schema), train, test)
    uncovered = sum(1 for p in pairs if p.inputs[1] != 2)
    assert evaluation.pooled == pytest.approx(1 - uncovered / len(pairs))
    assert all(p in train for p in evaluation.errors)


def test_thompson_select_prefers_high_alpha(tiger_schema):
    program = transition(STAY, tiger_schema)

    def node(node_id, alpha, beta):
        return CandidateNode(node_id, program, alpha, beta, 0.0, 0.0, 0.0, [], [], None, 0)

    tree = [node("low", 1.0, 26.0), node("high", 26.0, 1.0)]
    assert all(thompson_select(tree, seed) == "high" for seed in range(20))
    assert thompson_select(tree, 3) == thompson_select(tree, 3)
    with pytest.raises(ValueError):
        thompson_select([], 0)


def test_render_condition_and_outcome(tiger_schema):
    assert render_condition("transition", (tiger_state(0), 2), tiger_schema) == (
        "(state=TigerState(tiger_location=0), action=Action.LISTEN)"
    )
    assert render_condition("observation", (tiger_state(1), NO_ACTION, tiger_schema.empty_observation),
                            tiger_schema) == "(state=TigerState(tiger_location=1), action=NO_ACTION)"
    assert render_outcome(reward_value(-1.0, False), tiger_schema) == "(reward=-1.0, done=False)"


def test_error_block_shows_dataset_and_model_outcomes(tiger_dataset, tiger_schema):
    program = transition(FLIP_ALWAYS, tiger_schema)
    pairs = extract_pairs(tiger_dataset, "transition")
    result = coverage(program, pairs)
    node = CandidateNode("001-000", program, 1.0, 26.0, 0.0, 0.0, 0.0, result.errors, [], None, 0)
    block = build_error_block(node, "transition", tiger_schema, LearnConfig(nc=2, ns=2), seed=0)
    assert block.count("impossible under your model") == 2
    assert "action=Action.LISTEN" in block or "action=Action.OPEN" in block


@pytest.mark.parametrize("env_id", ENV_IDS)
def test_ground_truth_programs_cover_their_own_data(env_id):
    d = collect_demos(make_env(env_id), demo_policy(env_id), 10, 0)
    models = ground_truth(env_id)
    for component in COMPONENTS:
        pairs = extract_pairs(d, component)[:100]
        assert coverage(models.program(component), pairs).score == 1.0, component


def learn_state(d, proposer, cfg):
    return {
        "component": "transition",
        "dataset": d,
        "prev": None,
        "cfg": cfg,
        "proposer": proposer,
        "tracker": None,
        "phase": "offline",
        "seed": 0,
        "call_index": 1,
        "train_pairs": [],
        "test_pairs": [],
        "tree": [],
        "selected": None,
        "iteration": 0,
        "proposer_calls": 0,
        "failures": [],
        "best": None,
        "error": None,
    }


def test_refinement_updates_beta_parameters(tiger_dataset):
    proposer = ScriptedProposer({"transition": [FLIP_ALWAYS, FLIP_ON_OPEN]})
    state = split_node(learn_state(tiger_dataset, proposer, LearnConfig(smoothing=25.0)))
    state = root_node(state)
    root = state["tree"][0]
    assert root.coverage == 0.0
    assert (root.alpha, root.beta) == (1.0, 26.0)

    state["selected"] = root.node_id
    state = refine_node(state)
    child = state["tree"][1]
    c = child.coverage
    assert 0.0 < c < 1.0
    assert child.parent == root.node_id
    assert child.alpha == pytest.approx(1.0 + 25 * c, abs=1e-12)
    assert child.beta == pytest.approx(1.0 + 25 * (1 - c), abs=1e-12)
    assert root.alpha == pytest.approx(1.0 + 25 * c, abs=1e-12)
    assert root.beta == pytest.approx(26.0 + 25 * (1 - c), abs=1e-12)
    assert state["iteration"] == 1


# ---------------------------------------------------------------------------
# Learning loop
# ---------------------------------------------------------------------------


def test_refinement_repairs_a_flawed_transition(cache_dir, tiger_dataset, tiger_models):
    proposer = ScriptedProposer({"transition": [FLIP_ALWAYS, tiger_models.program("transition").text]})
    tracker = CandidateTracker("tiger", root=cache_dir)
    result = learn_component(tiger_dataset, None, "transition", LearnConfig(max_refinements=5), proposer,
                             seed=0, tracker=tracker)
    assert result.coverage == 1.0
    assert result.stats.proposer_calls <= 2
    assert result.stats.nodes_created == 2
    assert result.node_id == "001-001"
    assert [r.kind for r in proposer.requests] == ["initial", "refinement"]
    assert "impossible under your model" in proposer.requests[1].error_block

    entries = tracker.load_log()
    assert node_counts(entries) == {("offline", "transition"): 2}
    assert learn_invocations(entries, "offline") == 1
    assert sorted(p.name for p in (cache_dir / "tiger" / "transition").glob("*.pps")) == ["001-000.pps", "001-001.pps"]


def test_full_coverage_root_stops_immediately(tiger_dataset, tiger_models):
    proposer = ScriptedProposer.from_models(tiger_models)
    result = learn_component(tiger_dataset, None, "observation", LearnConfig(), proposer, seed=1)
    assert result.coverage == 1.0
    assert result.stats.proposer_calls == 1
    assert proposer.calls == {"observation": 1}


def test_previous_program_seeds_the_tree(tiger_dataset, tiger_models):
    proposer = ScriptedProposer({})
    result = learn_component(tiger_dataset, tiger_models.program("reward"), "reward", LearnConfig(), proposer, seed=0)
    assert result.program == tiger_models.program("reward")
    assert result.stats.proposer_calls == 0
    assert result.stats.nodes_created == 0


def test_previous_program_is_refined_when_incomplete(tiger_dataset, tiger_models, tiger_schema):
    proposer = ScriptedProposer({"transition": [STAY]})
    prev = transition(FLIP_ON_OPEN, tiger_schema)
    result = learn_component(tiger_dataset, prev, "transition", LearnConfig(max_refinements=3), proposer, seed=0)
    assert result.coverage == 1.0
    assert proposer.requests[0].kind == "refinement"
    assert proposer.requests[0].prev_program == prev


def test_budget_bounds_proposer_calls(tiger_dataset, tiger_schema):
    proposer = ScriptedProposer({"transition": [FLIP_ALWAYS]})
    result = learn_component(tiger_dataset, None, "transition", LearnConfig(max_refinements=3), proposer, seed=0)
    assert result.coverage == 0.0
    assert result.stats.nodes_created == 4
    assert result.node_id == "001-000"


def test_every_proposal_failing_raises(tiger_dataset):
    proposer = ScriptedProposer({"transition": ["def wrong(state, action):\n    return state\n"]})
    with pytest.raises(LearnFailure) as e:
        learn_component(tiger_dataset, None, "transition", LearnConfig(max_refinements=2), proposer, seed=0)
    assert e.value.component == "transition"
    assert "PpsTypeError" in str(e.value)
    assert proposer.calls["transition"] == 6


def test_single_episode_trains_on_everything(tiger_models):
    d = tiger_demos(1, 3)
    proposer = ScriptedProposer.from_models(tiger_models)
    result = learn_component(d, None, "transition", LearnConfig(), proposer, seed=0)
    assert result.stats.coverage_train == 1.0
    assert result.stats.coverage_test == 1.0


def test_learn_model_returns_program(tiger_dataset, tiger_models):
    program = learn_model(tiger_dataset, None, "initial", LearnConfig(), ScriptedProposer.from_models(tiger_models), 0)
    assert program == tiger_models.program("initial")


def test_learn_models_builds_a_model_set(cache_dir, tiger_dataset, tiger_models):
    tracker = CandidateTracker("tiger", root=cache_dir)
    models = learn_models(tiger_dataset, None, LearnConfig(), ScriptedProposer.from_models(tiger_models), 0, tracker)
    assert isinstance(models, ModelSet)
    for component in COMPONENTS:
        assert models.program(component) == tiger_models.program(component)
        assert models.stats[component].proposer_calls == 1
        assert models.provenance[component].coverage == 1.0
    assert learn_invocations(tracker.load_log(), "offline") == 4


def test_learn_models_keeps_unlisted_components(tiger_dataset, tiger_models):
    proposer = ScriptedProposer({"reward": [tiger_models.program("reward").text]})
    models = learn_models(tiger_dataset, tiger_models, LearnConfig(), proposer, 0, components=("reward",))
    assert models.program("transition") is tiger_models.program("transition")
    assert proposer.calls == {}


def test_learn_config_validation():
    with pytest.raises(ValueError):
        LearnConfig(max_refinements=0)
    with pytest.raises(ValueError):
        LearnConfig(smoothing=-1)
