import math
from collections import Counter

import numpy as np
import pytest

from conftest import tiger_obs, tiger_state
from environments import ENV_IDS, collect_demos, ground_truth, make_env
from model_learner import extract_pairs
from pomdp_core import COMPONENTS, canonical_encode, encode_inputs, reward_value
from pps_parser import PpsRuntimeError, parse
from pps_runtime import (
    Bernoulli,
    Categorical,
    ProgramSampler,
    SupportTable,
    TooManySites,
    UniformInt,
    enumerate_support,
    run,
    sampler_for,
)

LISTEN = 2


def transition(body: str, schema):
    return parse(f"def transition_func(state, action):\n{body}\n", "transition", schema)


def test_distribution_supports_sum_to_one():
    assert sum(p for _, p in Bernoulli(0.3).support()) == pytest.approx(1.0)
    assert sum(p for _, p in Categorical((1.0, 3.0, 0.0)).support()) == pytest.approx(1.0)
    assert [v for v, _ in Categorical((1.0, 3.0, 0.0)).support()] == [0, 1]
    assert len(UniformInt(2, 5).support()) == 4
    assert Bernoulli(1.0).support() == [(True, 1.0)]


def test_run_is_deterministic_per_seed(tiger_models, tiger_schema):
    program = tiger_models.program("observation")
    inputs = (tiger_state(0), LISTEN, tiger_schema.empty_observation)
    outputs = {run(program, inputs, seed) for seed in range(40)}
    assert run(program, inputs, 5) == run(program, inputs, 5)
    assert outputs == {tiger_obs(tiger_schema, "HEAR_LEFT"), tiger_obs(tiger_schema, "HEAR_RIGHT")}


def test_run_does_not_mutate_inputs(tiger_models):
    source = "def transition_func(state, action):\n    state.tiger_location = 1\n    return state\n"
    program = parse(source, "transition", tiger_models.schema)
    start = tiger_state(0)
    assert run(program, (start, 0), 0) == tiger_state(1)
    assert start == tiger_state(0)


def test_observation_support_is_exact(tiger_models, tiger_schema):
    table = enumerate_support(tiger_models.program("observation"), (tiger_state(1), LISTEN, tiger_schema.empty_observation))
    assert isinstance(table, SupportTable)
    assert table.probability(tiger_obs(tiger_schema, "HEAR_RIGHT")) == pytest.approx(0.85)
    assert table.probability(tiger_obs(tiger_schema, "HEAR_LEFT")) == pytest.approx(0.15)
    assert not table.contains(tiger_obs(tiger_schema, "NONE"))
    assert table.error_mass == 0.0


def test_reward_support(tiger_models):
    table = enumerate_support(tiger_models.program("reward"), (tiger_state(0), 0, tiger_state(0)))
    assert table.items() == [(reward_value(-100.0, True), 1.0)]


def test_support_merges_paths_with_equal_outputs(tiger_schema):
    program = transition(
        "    a = sample('a', Bernoulli(0.5))\n"
        "    b = sample('b', Bernoulli(0.5))\n"
        "    if a or b:\n"
        "        state.tiger_location = 1\n"
        "    return state",
        tiger_schema,
    )
    table = enumerate_support(program, (tiger_state(0), 0))
    assert len(table) == 2
    assert table.probability(tiger_state(1)) == pytest.approx(0.75)
    assert table.probability(tiger_state(0)) == pytest.approx(0.25)


def test_support_tracks_error_mass(tiger_schema):
    program = transition(
        "    if sample('boom', Bernoulli(0.2)):\n"
        "        state.tiger_location = 1 // 0\n"
        "    return state",
        tiger_schema,
    )
    table = enumerate_support(program, (tiger_state(0), 0))
    assert table.error_mass == pytest.approx(0.2)
    assert table.probability(tiger_state(0)) == pytest.approx(0.8)
    assert any("ZeroDivisionError" in e for e in table.errors)


def test_out_of_range_output_is_a_runtime_error(tiger_schema):
    program = transition("    state.tiger_location = 2\n    return state", tiger_schema)
    with pytest.raises(PpsRuntimeError):
        run(program, (tiger_state(0), 0), 0)
    table = enumerate_support(program, (tiger_state(0), 0))
    assert len(table) == 0
    assert table.error_mass == pytest.approx(1.0)


def test_invalid_distribution_parameters_raise(tiger_schema):
    program = transition("    if sample('x', Bernoulli(1.5)):\n        pass\n    return state", tiger_schema)
    with pytest.raises(PpsRuntimeError):
        run(program, (tiger_state(0), 0), 0)


def test_too_many_sites(tiger_schema):
    program = transition(
        "    for i in range(20):\n"
        "        if sample('flip', Bernoulli(0.5)):\n"
        "            pass\n"
        "    return state",
        tiger_schema,
    )
    result = enumerate_support(program, (tiger_state(0), 0), max_sites=16)
    assert isinstance(result, TooManySites)


def test_too_many_paths(tiger_schema):
    program = transition(
        "    for i in range(10):\n"
        "        if sample('flip', Bernoulli(0.5)):\n"
        "            pass\n"
        "    return state",
        tiger_schema,
    )
    assert isinstance(enumerate_support(program, (tiger_state(0), 0), max_paths=100), TooManySites)


def test_sampler_falls_back_to_seeded_runs(tiger_schema):
    program = transition(
        "    for i in range(20):\n"
        "        if sample('flip', Bernoulli(0.5)):\n"
        "            state.tiger_location = 1 - state.tiger_location\n"
        "    return state",
        tiger_schema,
    )
    sampler = ProgramSampler(program, max_sites=4)
    assert sampler.support((tiger_state(0), 0)) is None
    assert sampler.probability((tiger_state(0), 0), tiger_state(0)) is None
    rng = np.random.default_rng(1)
    assert sampler.sample((tiger_state(0), 0), rng) in (tiger_state(0), tiger_state(1))


def test_support_table_sampling_matches_probabilities(tiger_models, tiger_schema):
    table = enumerate_support(tiger_models.program("observation"), (tiger_state(0), LISTEN, tiger_schema.empty_observation))
    rng = np.random.default_rng(0)
    draws = [table.sample(rng) for _ in range(4000)]
    share = sum(d == tiger_obs(tiger_schema, "HEAR_LEFT") for d in draws) / len(draws)
    assert share == pytest.approx(0.85, abs=0.03)


def test_sampler_for_is_shared(tiger_models):
    program = tiger_models.program("initial")
    assert sampler_for(program) is sampler_for(program)


@pytest.mark.slow
@pytest.mark.parametrize("env_id", ENV_IDS)
def test_seeded_runs_match_enumerated_support(env_id):
    env = make_env(env_id)
    programs = ground_truth(env_id)
    rng = np.random.default_rng(7)
    d = collect_demos(env, lambda state, step: int(rng.integers(len(env.schema.actions))), 20, 0)
    z_scores = []
    for component in COMPONENTS:
        program = programs.program(component)
        conditions = {}
        for pair in extract_pairs(d, component):
            conditions.setdefault(encode_inputs(pair.inputs), pair.inputs)
        picked = list(conditions.values())
        order = np.random.default_rng(1).permutation(len(picked))[:20]
        for i in order:
            inputs = picked[i]
            table = enumerate_support(program, inputs)
            if isinstance(table, TooManySites):
                continue
            deterministic = len(table) == 1 and table.error_mass == 0
            runs = 50 if deterministic else 4000
            counts = Counter(canonical_encode(run(program, inputs, seed)) for seed in range(runs))
            for outcome, p in table.items():
                share = counts.pop(canonical_encode(outcome), 0) / runs
                if p in (0.0, 1.0):
                    assert share == p, (component, inputs)
                    continue
                z_scores.append(abs(share - p) / math.sqrt(p * (1 - p) / runs))
            assert not counts, (component, inputs)
    # chance alone puts about 0.3% of outcomes beyond 3 standard errors
    if z_scores:
        assert max(z_scores) < 5
        assert sum(z > 3 for z in z_scores) <= 0.01 * len(z_scores) + 1
