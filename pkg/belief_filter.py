"""
Particle Belief Filter
Beliefs as fixed-size particle multisets, with initialization, reset-observation
conditioning, Bayes-filter updates with rejuvenation, and entropy
"""

from __future__ import annotations

import hashlib
import logging
import struct
from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np

from pomdp_core import NO_ACTION, PomdpCoderError, RecordValue, Value, canonical_encode, derive_seed
from pps_parser import PpsRuntimeError, Program
from pps_runtime import run

logger = logging.getLogger(__name__)


class InitFailure(PomdpCoderError):
    """Every draw from the initial program failed."""

    def __init__(self, errors: list[str]):
        super().__init__("initial model produced no valid state", stage="belief",
                         context={"errors": "; ".join(errors[:3])})
        self.errors = errors


class ParticleDepletion(PomdpCoderError):
    """No particle consistent with the observation within the rejuvenation budget."""


@dataclass(frozen=True, eq=False)
class Belief:
    particles: tuple[RecordValue, ...]
    depth: int = 0
    terminal: bool = False
    key: str = field(init=False)

    def __post_init__(self):
        if not self.particles:
            raise ValueError("Belief needs at least one particle")
        object.__setattr__(self, "particles", tuple(self.particles))
        digest = hashlib.sha256()
        for encoded in sorted(canonical_encode(p) for p in self.particles):
            digest.update(struct.pack(">I", len(encoded)))
            digest.update(encoded)
        object.__setattr__(self, "key", digest.hexdigest())

    def __eq__(self, other) -> bool:
        return isinstance(other, Belief) and other.key == self.key

    def __hash__(self) -> int:
        return hash(self.key)

    def __len__(self) -> int:
        return len(self.particles)

    def counts(self) -> dict[bytes, tuple[RecordValue, int]]:
        table: dict[bytes, tuple[RecordValue, int]] = {}
        for p in self.particles:
            k = canonical_encode(p)
            value, n = table.get(k, (p, 0))
            table[k] = (value, n + 1)
        return table


def _draw_initial(initial, context: Value, seed: int) -> Value:
    if isinstance(initial, Program):
        return run(initial, (context,), seed)
    return initial.sample((context,), np.random.default_rng(seed))


def init_belief(initial, context: Value, n: int, seed: int) -> Belief:
    """N independent draws from the initial model (a Program or a sampler)."""
    if n <= 0:
        raise ValueError("n must be positive")
    particles: list[Value] = []
    errors: list[str] = []
    i = 0
    while len(particles) < n and i < 10 * n:
        try:
            particles.append(_draw_initial(initial, context, derive_seed(seed, i)))
        except PpsRuntimeError as e:
            errors.append(e.message)
        i += 1
    if not particles:
        raise InitFailure(errors)
    if len(particles) < n:
        logger.warning("⚠️ Initial model failed on %d draw(s); resampling %d particle(s)", len(errors), len(particles))
        rng = np.random.default_rng(derive_seed(seed, n, 1))
        particles = [particles[i] for i in rng.integers(len(particles), size=n)]
    return Belief(tuple(particles))


def _observation_weight(models, state: Value, action: int, observation: Value,
                        rollouts: int, rng: np.random.Generator) -> tuple[float, bool]:
    """(weight, exact); exact weights are probabilities, Monte Carlo weights are 0/1."""
    sampler = models.sampler("observation")
    inputs = (state, action, models.schema.empty_observation)
    table = sampler.support(inputs)
    if table is not None:
        return table.probability(observation), True
    target = canonical_encode(observation)
    for _ in range(max(rollouts, 1)):
        try:
            if canonical_encode(sampler.sample(inputs, rng)) == target:
                return 1.0, False
        except PpsRuntimeError:
            continue
    return 0.0, False


def _resample(candidates: list[tuple[Value, float, bool]], n: int, rng: np.random.Generator) -> tuple[Value, ...]:
    """Systematic resampling for exact weights, uniform picks for Monte Carlo ones.

    Candidates are grouped by state first, so every distinct state receives the
    floor or the ceiling of its expected particle count.
    """
    ordered = sorted(candidates, key=lambda c: canonical_encode(c[0]))
    states = [c[0] for c in ordered]
    if all(c[2] for c in ordered):
        weights = np.array([c[1] for c in ordered], dtype=float)
        cumulative = np.cumsum(weights / weights.sum())
        positions = (rng.random() + np.arange(n)) / n
        picks = np.minimum(np.searchsorted(cumulative, positions, side="right"), len(states) - 1)
    else:
        picks = rng.integers(len(states), size=n)
    return tuple(states[i] for i in picks)


def _rejuvenate(draw: Callable[[np.random.Generator], Value], weigh, max_draws: int, need: int,
                rng: np.random.Generator) -> list[tuple[Value, float, bool]]:
    found: list[tuple[Value, float, bool]] = []
    for _ in range(max_draws):
        try:
            candidate = draw(rng)
        except PpsRuntimeError:
            continue
        weight, exact = weigh(candidate, rng)
        if weight > 0:
            found.append((candidate, weight, exact))
            if len(found) >= need:
                break
    return found


def update(b: Belief, a: int, o: Value, models, max_rejuvenation: int, seed: int,
           rollouts: int = 1) -> Belief:
    """Propagate, keep observation-consistent particles, resample to N."""
    n = len(b)
    survivors: list[tuple[Value, float, bool]] = []
    transition = models.sampler("transition")
    for i, particle in enumerate(b.particles):
        rng = np.random.default_rng(derive_seed(seed, i))
        try:
            next_state = transition.sample((particle, a), rng)
        except PpsRuntimeError:
            continue
        weight, exact = _observation_weight(models, next_state, a, o, rollouts, rng)
        if weight > 0:
            survivors.append((next_state, weight, exact))

    if not survivors:
        logger.info("🔍 No particle survived; rejuvenating with up to %d draws", max_rejuvenation)
        counter = iter(range(max_rejuvenation))

        def redraw(rng):
            j = next(counter, 0) % n
            return transition.sample((b.particles[j], a), rng)

        survivors = _rejuvenate(
            redraw,
            lambda s, rng: _observation_weight(models, s, a, o, rollouts, rng),
            max_rejuvenation,
            1,
            np.random.default_rng(derive_seed(seed, n, 2)),
        )
        if not survivors:
            raise ParticleDepletion(
                "no particle consistent with the observation",
                stage="belief",
                context={"action": a, "draws": max_rejuvenation},
            )

    rng = np.random.default_rng(derive_seed(seed, n, 3))
    return Belief(_resample(survivors, n, rng), depth=b.depth)


def condition(b: Belief, o: Value, models, max_rejuvenation: int, seed: int, rollouts: int = 1) -> Belief:
    """Reweight an initial belief on the reset observation (no transition).

    Missing particles are replaced with fresh draws from the initial model until
    N consistent ones are found or the budget runs out.
    """
    n = len(b)
    survivors: list[tuple[Value, float, bool]] = []
    for i, particle in enumerate(b.particles):
        rng = np.random.default_rng(derive_seed(seed, i))
        weight, exact = _observation_weight(models, particle, NO_ACTION, o, rollouts, rng)
        if weight > 0:
            survivors.append((particle, weight, exact))

    if len(survivors) < n:
        initial = models.sampler("initial")
        context = models.schema.initial_context
        found = _rejuvenate(
            lambda rng: initial.sample((context,), rng),
            lambda s, rng: _observation_weight(models, s, NO_ACTION, o, rollouts, rng),
            max_rejuvenation,
            n - len(survivors),
            np.random.default_rng(derive_seed(seed, n, 2)),
        )
        survivors.extend(found)
    if not survivors:
        raise ParticleDepletion(
            "no initial state consistent with the first observation",
            stage="belief",
            context={"draws": max_rejuvenation},
        )
    rng = np.random.default_rng(derive_seed(seed, n, 3))
    return Belief(_resample(survivors, n, rng))


def entropy(b: Belief) -> float:
    counts = np.array([count for _, count in b.counts().values()], dtype=float)
    p = counts / counts.sum()
    return float(-(p * np.log(p)).sum())


def probability(b: Belief, predicate: Callable[[RecordValue], bool]) -> float:
    """Fraction of particles satisfying predicate."""
    return sum(1 for p in b.particles if predicate(p)) / len(b)


def modal_particle(b: Belief) -> RecordValue:
    """Most frequent particle; ties go to the smallest canonical encoding."""
    best = min(b.counts().items(), key=lambda item: (-item[1][1], item[0]))
    return best[1][0]


def belief_from_states(states: Iterable[RecordValue]) -> Belief:
    return Belief(tuple(states))
