"""
Baseline Agents
Random, oracle, tabular-model, behavior-cloning and direct-LLM agents, plus the
planning agent the learned models run in
"""

from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np

from belief_filter import Belief, condition, init_belief, update
from belief_planner import PlanFailure, PlannerConfig, plan
from model_learner import extract_pairs
from pomdp_core import (
    COMPONENTS,
    NO_ACTION,
    Dataset,
    DomainSchema,
    RecordValue,
    TransitionRecord,
    Value,
    canonical_encode,
    derive_seed,
    encode_inputs,
    render_value,
)
from pps_runtime import SupportTable
from program_proposer import ChatClient, NoCodeBlock, ProposalError, build_direct_llm_prompt, extract_next_action

logger = logging.getLogger(__name__)

AGENT_IDS = ("random", "oracle", "tabular", "bc", "direct-llm", "pomdp-coder")


class Agent(Protocol):
    name: str

    def begin_episode(self, observation: RecordValue, seed: int) -> None: ...

    def act(self, step: int, true_state: RecordValue) -> int: ...

    def observe(self, action: int, observation: RecordValue, reward: float) -> None: ...


# ---------------------------------------------------------------------------
# Tabular models
# ---------------------------------------------------------------------------


class TabularSampler:
    """Count-based conditional table with a uniform fallback for unseen conditions."""

    def __init__(self, counts: dict[bytes, Counter], values: dict[bytes, Value]):
        self.counts = counts
        self.values = values
        self._tables: dict[bytes, SupportTable] = {}
        if values:
            share = 1.0 / len(values)
            self.fallback = SupportTable(tuple(values.values()), tuple(share for _ in values))
        else:
            self.fallback = SupportTable((), (), errors=("no data for this component",))

    def support(self, inputs: Sequence[Value]) -> SupportTable:
        key = encode_inputs(inputs)
        table = self._tables.get(key)
        if table is None:
            counter = self.counts.get(key)
            if counter is None:
                return self.fallback
            total = sum(counter.values())
            table = SupportTable(
                tuple(self.values[k] for k in counter),
                tuple(n / total for n in counter.values()),
            )
            self._tables[key] = table
        return table

    def sample(self, inputs: Sequence[Value], rng: np.random.Generator) -> Value:
        return self.support(inputs).sample(rng)

    def probability(self, inputs: Sequence[Value], outcome: Value) -> float:
        return self.support(inputs).probability(outcome)

    def seen(self, inputs: Sequence[Value]) -> bool:
        return encode_inputs(inputs) in self.counts


@dataclass
class TabularModels:
    schema: DomainSchema
    samplers: dict[str, TabularSampler]

    def sampler(self, component: str) -> TabularSampler:
        return self.samplers[component]


def tabular_learn(d: Dataset) -> TabularModels:
    """Conditional probability tables from counts, one per component."""
    if not len(d):
        raise ValueError("tabular_learn needs a nonempty dataset")
    samplers = {}
    for component in COMPONENTS:
        counts: dict[bytes, Counter] = {}
        values: dict[bytes, Value] = {}
        for pair in extract_pairs(d, component):
            outcome_key = canonical_encode(pair.outcome)
            values.setdefault(outcome_key, pair.outcome)
            counts.setdefault(encode_inputs(pair.inputs), Counter())[outcome_key] += 1
        samplers[component] = TabularSampler(counts, values)
    logger.info("📊 Tabular tables: %s", {c: len(s.counts) for c, s in samplers.items()})
    return TabularModels(d.schema, samplers)


# ---------------------------------------------------------------------------
# Behavior cloning
# ---------------------------------------------------------------------------


@dataclass
class BCPolicy:
    votes: dict[bytes, Counter]
    n_actions: int
    default_action: int = 0

    def act(self, state: RecordValue) -> int:
        counter = self.votes.get(canonical_encode(state))
        if not counter:
            return self.default_action
        # highest count, lowest action index on ties
        return min(counter, key=lambda a: (-counter[a], a))


def bc_learn(d: Dataset) -> BCPolicy:
    votes: dict[bytes, Counter] = {}
    for record in d.records:
        votes.setdefault(canonical_encode(record.state), Counter())[record.action] += 1
    return BCPolicy(votes, len(d.schema.actions))


def bc_act(policy: BCPolicy, state: RecordValue) -> int:
    return policy.act(state)


# ---------------------------------------------------------------------------
# Agents
# ---------------------------------------------------------------------------


class RandomAgent:
    name = "random"

    def __init__(self, n_actions: int, seed: int = 0):
        self.n_actions = n_actions
        self.rng = np.random.default_rng(seed)

    def begin_episode(self, observation: RecordValue, seed: int) -> None:
        self.rng = np.random.default_rng(seed)

    def act(self, step: int, true_state: RecordValue) -> int:
        return int(self.rng.integers(self.n_actions))

    def observe(self, action: int, observation: RecordValue, reward: float) -> None:
        pass


class BCAgent:
    """Queries the cloned policy with the simulator's true state."""

    name = "bc"

    def __init__(self, policy: BCPolicy):
        self.policy = policy

    def begin_episode(self, observation: RecordValue, seed: int) -> None:
        pass

    def act(self, step: int, true_state: RecordValue) -> int:
        return self.policy.act(true_state)

    def observe(self, action: int, observation: RecordValue, reward: float) -> None:
        pass


@dataclass
class BeliefSettings:
    n_particles: int = 50
    max_rejuvenation: int = 250_000
    rollouts: int = 1


class PlanningAgent:
    """Particle filter plus belief-space planner over a set of models."""

    def __init__(self, models, planner: PlannerConfig, belief: BeliefSettings, name: str = "pomdp-coder"):
        self.models = models
        self.planner = planner
        self.belief_settings = belief
        self.name = name
        self.belief: Belief | None = None
        self.seed = 0
        self.step = 0
        self.rng = np.random.default_rng(0)

    def begin_episode(self, observation: RecordValue, seed: int) -> None:
        self.seed = seed
        self.step = 0
        self.rng = np.random.default_rng(derive_seed(seed, 99))
        cfg = self.belief_settings
        prior = init_belief(self.models.sampler("initial"), self.models.schema.initial_context,
                            cfg.n_particles, derive_seed(seed, 0))
        self.belief = condition(prior, observation, self.models, cfg.max_rejuvenation,
                                derive_seed(seed, 1), cfg.rollouts)

    def act(self, step: int, true_state: RecordValue) -> int:
        try:
            return plan(self.belief, self.models, self.planner, derive_seed(self.seed, 2, step))
        except PlanFailure as e:
            logger.warning("⚠️ %s planner failed (%s); acting randomly", self.name, e.message)
            return int(self.rng.integers(len(self.models.schema.actions)))

    def observe(self, action: int, observation: RecordValue, reward: float) -> None:
        self.step += 1
        cfg = self.belief_settings
        self.belief = update(self.belief, action, observation, self.models, cfg.max_rejuvenation,
                             derive_seed(self.seed, 3, self.step), cfg.rollouts)


def oracle_agent(env, planner: PlannerConfig, belief: BeliefSettings) -> PlanningAgent:
    return PlanningAgent(env.ground_truth, planner, belief, name="oracle")


def tabular_agent(d: Dataset, planner: PlannerConfig, belief: BeliefSettings) -> PlanningAgent:
    return PlanningAgent(tabular_learn(d), planner, belief, name="tabular")


# ---------------------------------------------------------------------------
# Direct LLM
# ---------------------------------------------------------------------------


def _action_text(action: int, schema: DomainSchema) -> str:
    return "NO_ACTION" if action == NO_ACTION else f"Action.{schema.actions[action]}"


def render_episode(records: Sequence[TransitionRecord], schema: DomainSchema) -> str:
    lines = []
    for r in records:
        lines.append(
            f"step {r.step}: action={_action_text(r.action, schema)} "
            f"observation={render_value(r.observation, schema)} reward={r.reward!r} done={r.done}"
        )
    return "\n".join(lines)


@dataclass
class DirectLlmAgent:
    """Asks the chat model for every action; falls back to action 0 when it cannot answer."""

    client: ChatClient
    schema: DomainSchema
    demos: list[str]
    max_retries: int = 2
    name: str = "direct-llm"
    history: list[str] = field(default_factory=list)

    def begin_episode(self, observation: RecordValue, seed: int) -> None:
        self.history = [f"start: observation={render_value(observation, self.schema)}"]

    def act(self, step: int, true_state: RecordValue) -> int:
        prompt = build_direct_llm_prompt(self.schema, self.demos, self.history)
        for attempt in range(self.max_retries + 1):
            try:
                return extract_next_action(self.client.complete(prompt), len(self.schema.actions))
            except (NoCodeBlock, ProposalError) as e:
                logger.warning("⚠️ Direct-LLM answer unusable (attempt %d): %s", attempt + 1, e)
        logger.error("❌ Direct-LLM gave no valid action; falling back to action 0")
        return 0

    def observe(self, action: int, observation: RecordValue, reward: float) -> None:
        self.history.append(
            f"step {len(self.history) - 1}: action={_action_text(action, self.schema)} "
            f"observation={render_value(observation, self.schema)} reward={reward!r}"
        )


def direct_llm_agent(client: ChatClient, schema: DomainSchema, demos: Dataset) -> DirectLlmAgent:
    rendered = [render_episode(records, schema) for records in demos.episodes().values()]
    return DirectLlmAgent(client, schema, rendered)
