"""
Determinized Belief-Space Planner
A*-style graph search over particle beliefs. Each expansion samples every
action through the transition, observation and reward models, splits the
samples into one child belief per observation, and scores children with

    g' = g - r_hat - lam * log(p_hat) + alpha * H(b') + action_cost

The root action is the one with the highest expected discounted return over
the discovered branches, with the first action on the path to the cheapest
node breaking ties.
"""

from __future__ import annotations

import heapq
import itertools
import json
import logging
import math
from dataclasses import dataclass

import numpy as np

from belief_filter import Belief, entropy
from pomdp_core import PomdpCoderError, RecordValue, Value, canonical_encode, derive_seed
from pps_parser import PpsRuntimeError

logger = logging.getLogger(__name__)


class NoActionNeeded(PomdpCoderError):
    """The root belief is already terminal."""


class PlanFailure(PomdpCoderError):
    """Every model run during expansion errored."""


@dataclass(frozen=True)
class PlannerConfig:
    horizon: int = 50
    lam: float = 0.1
    alpha: float = 0.0
    action_cost: float = 0.01
    rollouts_per_query: int = 5
    gamma: float = 0.98
    trace_path: str | None = None

    def __post_init__(self):
        if self.horizon <= 0:
            raise ValueError("horizon must be positive")
        if self.rollouts_per_query < 1:
            raise ValueError("rollouts_per_query must be at least 1")
        if not 0 < self.gamma < 1:
            raise ValueError("gamma must lie in (0, 1)")


@dataclass
class SearchNode:
    belief: Belief
    g: float
    parent: "SearchNode | None" = None
    incoming_action: int | None = None
    terminal: bool = False
    first_action: int | None = None


@dataclass(frozen=True)
class Sample:
    state: RecordValue
    next_state: RecordValue
    observation: RecordValue
    reward: float
    done: bool


@dataclass(frozen=True)
class Child:
    belief: Belief
    p_hat: float
    r_hat: float
    terminal: bool
    observation: Value


@dataclass(frozen=True)
class Edge:
    action: int
    p_hat: float
    r_hat: float
    child_key: str
    terminal: bool


def simulate(b: Belief, a: int, models, rollouts: int, rng: np.random.Generator) -> tuple[list[Sample], list[str]]:
    """rollouts x N (s, s', o, r, done) samples for one action; errors are collected, not raised."""
    transition = models.sampler("transition")
    observe = models.sampler("observation")
    reward = models.sampler("reward")
    empty_obs = models.schema.empty_observation
    samples: list[Sample] = []
    errors: list[str] = []
    for _ in range(rollouts):
        for s in b.particles:
            try:
                s2 = transition.sample((s, a), rng)
                o = observe.sample((s2, a, empty_obs), rng)
                outcome = reward.sample((s, a, s2), rng)
            except PpsRuntimeError as e:
                errors.append(e.message)
                continue
            samples.append(Sample(s, s2, o, outcome["reward"], outcome["done"]))
    return samples, errors


def branch(b: Belief, a: int, samples: list[Sample], n: int, seed: int = 0) -> list[Child]:
    """One child belief per distinct sampled observation, in first-seen order."""
    groups: dict[bytes, list[Sample]] = {}
    for sample in samples:
        groups.setdefault(canonical_encode(sample.observation), []).append(sample)
    total = len(samples)
    rng = np.random.default_rng(seed)
    children = []
    for group in groups.values():
        states = [s.next_state for s in group]
        if len(states) != n:
            states = [states[i] for i in rng.integers(len(states), size=n)]
        terminal = sum(1 for s in group if s.done) / len(group) > 0.5
        children.append(Child(
            belief=Belief(tuple(states), depth=b.depth + 1, terminal=terminal),
            p_hat=len(group) / total,
            r_hat=float(np.mean([s.reward for s in group])),
            terminal=terminal,
            observation=group[0].observation,
        ))
    return children


def _search_key(belief: Belief, terminal: bool) -> str:
    # terminal children can share particles with the belief they came from
    return belief.key + "/terminal" if terminal else belief.key


def _action_values(out_edges: list[Edge], values: dict[str, float], gamma: float) -> dict[int, float]:
    q: dict[int, float] = {}
    for e in out_edges:
        future = 0.0 if e.terminal else gamma * values.get(e.child_key, 0.0)
        q[e.action] = q.get(e.action, 0.0) + e.p_hat * (e.r_hat + future)
    return q


def backup_values(edges: dict[str, list[Edge]], expanded: list[str], gamma: float,
                  max_sweeps: int = 500, tol: float = 1e-10) -> dict[str, float]:
    """Expected discounted return of every expanded belief over the discovered graph.

    Unexpanded and terminal beliefs are worth 0. Sweeps run in reverse expansion
    order so values flow from the frontier back to the root.
    """
    values = {k: 0.0 for k in expanded}
    for _ in range(max_sweeps):
        delta = 0.0
        for k in reversed(expanded):
            q = _action_values(edges[k], values, gamma)
            v = max(q.values()) if q else 0.0
            delta = max(delta, abs(v - values[k]))
            values[k] = v
        if delta < tol:
            break
    return values


def plan(b0: Belief, models, cfg: PlannerConfig, seed: int) -> int:
    """Best first action from b0; deterministic given seed.

    Nodes are expanded in order of lowest cost-to-come g. The returned action
    maximizes the expected discounted return backed up over every discovered
    branch; ties go to the first action on the path to the node of minimal g.
    """
    if b0.terminal:
        raise NoActionNeeded("root belief is terminal", stage="plan")
    n_actions = len(models.schema.actions)
    order = itertools.count()
    root_key = _search_key(b0, False)
    root = SearchNode(b0, 0.0)
    nodes: dict[str, SearchNode] = {root_key: root}
    inserted: dict[str, int] = {root_key: next(order)}
    open_heap: list[tuple[float, int, str]] = [(0.0, inserted[root_key], root_key)]
    closed: set[str] = set()
    edges: dict[str, list[Edge]] = {}
    expanded: list[str] = []
    errors: list[str] = []
    any_sample = False
    trace = open(cfg.trace_path, "a", encoding="utf-8") if cfg.trace_path else None

    try:
        while open_heap and len(expanded) < cfg.horizon:
            g, _, key = heapq.heappop(open_heap)
            node = nodes[key]
            if key in closed or g > node.g:
                continue
            if node.terminal:
                continue
            closed.add(key)
            expanded.append(key)
            expansions = len(expanded)
            out_edges: list[Edge] = []
            trace_children = []
            for a in range(n_actions):
                rng = np.random.default_rng(derive_seed(seed, expansions, a))
                samples, run_errors = simulate(node.belief, a, models, cfg.rollouts_per_query, rng)
                errors.extend(run_errors[:3])
                if not samples:
                    continue
                any_sample = True
                for child in branch(node.belief, a, samples, len(node.belief), derive_seed(seed, expansions, a, 1)):
                    ck = _search_key(child.belief, child.terminal)
                    out_edges.append(Edge(a, child.p_hat, child.r_hat, ck, child.terminal))
                    g2 = (g - child.r_hat - cfg.lam * math.log(child.p_hat)
                          + cfg.alpha * entropy(child.belief) + cfg.action_cost)
                    if ck in closed:
                        continue
                    if ck in nodes and g2 >= nodes[ck].g:
                        continue
                    nodes[ck] = SearchNode(
                        belief=child.belief,
                        g=g2,
                        parent=node,
                        incoming_action=a,
                        terminal=child.terminal,
                        first_action=a if node is root else node.first_action,
                    )
                    inserted[ck] = next(order)
                    heapq.heappush(open_heap, (g2, inserted[ck], ck))
                    trace_children.append({"action": a, "key": ck[:16], "g": g2, "p": child.p_hat})
            edges[key] = out_edges
            if trace:
                trace.write(json.dumps({"expansion": expansions, "key": key[:16], "g": g,
                                        "children": trace_children}) + "\n")
    finally:
        if trace:
            trace.close()

    if not any_sample:
        raise PlanFailure(
            "every model run errored during expansion",
            stage="plan",
            context={"errors": "; ".join(dict.fromkeys(errors).keys())[:500]},
        )
    if not edges.get(root_key):
        raise PlanFailure("search discovered no successor beliefs", stage="plan")

    values = backup_values(edges, expanded, cfg.gamma)
    q = _action_values(edges[root_key], values, cfg.gamma)
    best_q = max(q.values())
    tied = sorted(a for a, v in q.items() if best_q - v <= 1e-12)
    action = tied[0]
    if len(tied) > 1:
        candidates = [(n.g, inserted[k], n.first_action) for k, n in nodes.items() if n.first_action in tied]
        if candidates:
            action = min(candidates)[2]
    logger.debug("📊 Planned %d expansion(s); action %d with expected return %.4f", len(expanded), action, best_q)
    return action
