import math
import time

import pytest

from belief_filter import (
    Belief,
    InitFailure,
    ParticleDepletion,
    belief_from_states,
    condition,
    entropy,
    init_belief,
    modal_particle,
    probability,
    update,
)
from conftest import tiger_obs, tiger_state
from oracles import tiger_posterior_left
from pps_parser import parse

OPEN_LEFT, LISTEN = 0, 2


def is_left(state) -> bool:
    return state["tiger_location"] == 0


def uniform_belief(n: int = 1000) -> Belief:
    return belief_from_states([tiger_state(i % 2) for i in range(n)])


def test_belief_key_ignores_particle_order():
    a = belief_from_states([tiger_state(0), tiger_state(1), tiger_state(1)])
    b = belief_from_states([tiger_state(1), tiger_state(0), tiger_state(1)])
    c = belief_from_states([tiger_state(0), tiger_state(0), tiger_state(1)])
    assert a == b
    assert a.key == b.key
    assert a != c


def test_empty_belief_is_rejected():
    with pytest.raises(ValueError):
        Belief(())


def test_init_belief_draws_from_initial_model(tiger_models, tiger_schema):
    b = init_belief(tiger_models.program("initial"), tiger_schema.initial_context, 400, seed=3)
    assert len(b) == 400
    assert probability(b, is_left) == pytest.approx(0.5, abs=0.1)
    again = init_belief(tiger_models.sampler("initial"), tiger_schema.initial_context, 400, seed=3)
    assert len(again) == 400


def test_init_belief_is_deterministic(tiger_models, tiger_schema):
    first = init_belief(tiger_models.program("initial"), tiger_schema.initial_context, 50, seed=9)
    second = init_belief(tiger_models.program("initial"), tiger_schema.initial_context, 50, seed=9)
    assert first == second


def test_init_failure_collects_errors(tiger_schema):
    broken = parse(
        "def initial_func(empty_state):\n    state = empty_state\n    state.tiger_location = 5\n    return state\n",
        "initial",
        tiger_schema,
    )
    with pytest.raises(InitFailure) as e:
        init_belief(broken, tiger_schema.initial_context, 5, seed=0)
    assert e.value.errors


def test_init_belief_rejects_nonpositive_size(tiger_models, tiger_schema):
    with pytest.raises(ValueError):
        init_belief(tiger_models.program("initial"), tiger_schema.initial_context, 0, seed=0)


@pytest.mark.parametrize("heard", [["HEAR_LEFT"], ["HEAR_LEFT", "HEAR_LEFT"], ["HEAR_LEFT", "HEAR_RIGHT"],
                                   ["HEAR_RIGHT", "HEAR_RIGHT", "HEAR_LEFT"]])
def test_listen_updates_match_bayes_posterior(tiger_models, tiger_schema, heard):
    b = uniform_belief(2000)
    for i, variant in enumerate(heard):
        b = update(b, LISTEN, tiger_obs(tiger_schema, variant), tiger_models, max_rejuvenation=100, seed=i)
    expected = tiger_posterior_left(heard.count("HEAR_LEFT"), heard.count("HEAR_RIGHT"))
    assert len(b) == 2000
    assert probability(b, is_left) == pytest.approx(expected, abs=0.04)


@pytest.mark.parametrize("k", [1, 2, 3])
def test_fifty_particle_posterior_within_three_sigma(tiger_models, tiger_schema, k):
    start = time.perf_counter()
    b = uniform_belief(50)
    for i in range(k):
        b = update(b, LISTEN, tiger_obs(tiger_schema, "HEAR_LEFT"), tiger_models, max_rejuvenation=100, seed=i)
    elapsed = time.perf_counter() - start

    p = 0.85 ** k / (0.85 ** k + 0.15 ** k)
    assert p == pytest.approx(tiger_posterior_left(k, 0))
    assert len(b) == 50
    assert abs(probability(b, is_left) - p) <= 3 * math.sqrt(p * (1 - p) / 50)
    assert elapsed < 5.0


def test_resampling_gives_each_state_its_expected_share(tiger_models, tiger_schema):
    b = update(uniform_belief(50), LISTEN, tiger_obs(tiger_schema, "HEAR_RIGHT"), tiger_models, 100, seed=3)
    # 25 * 0.15 against 25 * 0.85 of the weight: 7.5 expected left particles
    assert round(probability(b, is_left) * 50) in (7, 8)


def test_update_is_deterministic_per_seed(tiger_models, tiger_schema):
    b = uniform_belief(100)
    o = tiger_obs(tiger_schema, "HEAR_RIGHT")
    assert update(b, LISTEN, o, tiger_models, 10, seed=4) == update(b, LISTEN, o, tiger_models, 10, seed=4)


def test_impossible_observation_depletes(tiger_models, tiger_schema):
    with pytest.raises(ParticleDepletion):
        update(uniform_belief(20), OPEN_LEFT, tiger_obs(tiger_schema, "HEAR_LEFT"), tiger_models, 50, seed=0)


def test_condition_keeps_consistent_particles(tiger_models, tiger_schema):
    b = uniform_belief(100)
    conditioned = condition(b, tiger_schema.empty_observation, tiger_models, 50, seed=0)
    assert len(conditioned) == 100
    assert probability(conditioned, is_left) == pytest.approx(0.5, abs=0.15)


def test_condition_on_impossible_reset_observation(tiger_models, tiger_schema):
    with pytest.raises(ParticleDepletion):
        condition(uniform_belief(10), tiger_obs(tiger_schema, "HEAR_LEFT"), tiger_models, 20, seed=0)


def test_entropy():
    assert entropy(belief_from_states([tiger_state(0)] * 10)) == pytest.approx(0.0)
    assert entropy(uniform_belief(10)) == pytest.approx(math.log(2))


def test_modal_particle_breaks_ties_by_encoding():
    assert modal_particle(uniform_belief(10)) == tiger_state(0)
    assert modal_particle(belief_from_states([tiger_state(1)] * 3 + [tiger_state(0)])) == tiger_state(1)
