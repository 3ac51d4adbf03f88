"""
Environments
Ground-truth simulators for Tiger, RockSample(4,4) and five MiniGrid variants.
Each simulator samples its own shipped model programs, so stepping the
environment and running the ground-truth ModelSet are the same distribution.
"""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Callable

import numpy as np

import settings
from model_learner import ModelSet, Provenance
from pomdp_core import (
    COMPONENTS,
    NO_ACTION,
    BoolType,
    Dataset,
    DomainSchema,
    EnumType,
    EnumValue,
    GridType,
    GridValue,
    IntType,
    PomdpCoderError,
    RecordType,
    RecordValue,
    TransitionRecord,
    canonical_encode,
    default_value,
    derive_seed,
    enumerate_values,
)
from pps_parser import load_program

logger = logging.getLogger(__name__)

PROGRAM_DIR = Path(__file__).resolve().parent / "programs"

ENV_IDS = (
    "tiger",
    "rocksample-4-4",
    "minigrid-empty",
    "minigrid-corners",
    "minigrid-lava",
    "minigrid-rooms",
    "minigrid-unlock",
)


class StepAfterDone(PomdpCoderError):
    """step() called on a finished episode."""


class UnknownEnvironment(PomdpCoderError):
    """No environment registered under that id."""


# ---------------------------------------------------------------------------
# Schemas
# ---------------------------------------------------------------------------

TIGER_OBS = EnumType("TigerObs", ("NONE", "HEAR_LEFT", "HEAR_RIGHT"))


def tiger_schema() -> DomainSchema:
    return DomainSchema(
        name="tiger",
        state=RecordType("TigerState", (("tiger_location", IntType(0, 1)),)),
        observation=RecordType("TigerObservation", (("obs", TIGER_OBS),)),
        actions=("OPEN_LEFT", "OPEN_RIGHT", "LISTEN"),
        description=(
            "You stand in front of two closed doors. Behind one door is a tiger, behind the other a treasure. "
            "tiger_location is 0 when the tiger is behind the left door and 1 when it is behind the right door. "
            "Listening may tell you which side the tiger is on, but the hearing is noisy. "
            "Opening a door ends the episode."
        ),
        goal_description="Open the door with the treasure while avoiding the tiger; listening has a small cost.",
    )


ROCK_X = (1, 3, 2, 0)
ROCK_Y = (0, 1, 2, 3)
ROCK_START = (0, 2)
ROCK_READING = EnumType("RockReading", ("NONE", "GOOD", "BAD"))


def rocksample_schema() -> DomainSchema:
    fields = [("agent_x", IntType(0, 3)), ("agent_y", IntType(0, 3))]
    fields += [(f"rock_{i}", BoolType()) for i in range(4)]
    rocks = ", ".join(f"rock {i} at ({x}, {y})" for i, (x, y) in enumerate(zip(ROCK_X, ROCK_Y)))
    return DomainSchema(
        name="rocksample-4-4",
        state=RecordType("RockState", tuple(fields)),
        observation=RecordType("RockObservation", (("reading", ROCK_READING),)),
        actions=("NORTH", "SOUTH", "EAST", "WEST", "SAMPLE", "CHECK_0", "CHECK_1", "CHECK_2", "CHECK_3"),
        description=(
            f"A rover moves on a 4x4 grid of cells (x to the east, y to the north). Rocks lie at fixed cells: {rocks}. "
            "Each rock is either good (True) or bad (False). CHECK_i points a noisy sensor at rock i; "
            "the sensor gets less reliable the further away the rock is. SAMPLE collects the rock under the rover. "
            "Moving east off the right edge of the grid ends the episode."
        ),
        goal_description="Sample the good rocks, avoid sampling bad ones, then leave the grid through its east edge.",
    )


CELL = EnumType("Cell", ("EMPTY", "WALL", "GOAL", "LAVA", "KEY", "DOOR_LOCKED", "DOOR_OPEN"))
OBS_CELL = EnumType("ObsCell", ("UNSEEN",) + CELL.variants)
DIRECTION = EnumType("Direction", ("NORTH", "EAST", "SOUTH", "WEST"))
MINIGRID_ACTIONS = ("TURN_LEFT", "TURN_RIGHT", "FORWARD", "PICKUP", "TOGGLE")


@dataclass(frozen=True)
class GridLayout:
    width: int
    height: int
    walls: tuple[tuple[int, int], ...] = ()
    locked_doors: tuple[tuple[int, int], ...] = ()
    description: str = ""


def _rooms_walls() -> tuple[tuple[int, int], ...]:
    doorways = {(5, 2), (5, 8), (2, 5), (8, 5)}
    cells = [(5, y) for y in range(1, 10)] + [(x, 5) for x in range(1, 10)]
    return tuple(c for c in dict.fromkeys(cells) if c not in doorways)


MINIGRID_LAYOUTS = {
    "empty": GridLayout(5, 5, description=(
        "An empty room surrounded by walls. The agent always starts in the top left cell and the goal "
        "square is in the bottom right corner.")),
    "corners": GridLayout(10, 10, description=(
        "An empty room surrounded by walls. The goal square is in a randomly selected corner of the room "
        "and the agent starts at a random cell facing a random direction.")),
    "lava": GridLayout(10, 10, description=(
        "A room with a randomly positioned vertical column of lava that has a single gap. Stepping into "
        "lava ends the episode without reward. The goal square is in the bottom right corner.")),
    "rooms": GridLayout(11, 11, walls=_rooms_walls(), description=(
        "Four rooms arranged two by two, connected by one-cell doorways. The agent starts in the top "
        "right room; the goal square is somewhere in the bottom right room.")),
    "unlock": GridLayout(13, 7, walls=tuple((6, y) for y in range(1, 6) if y != 3), locked_doors=((6, 3),),
                         description=(
        "Two rooms separated by a wall with a locked door. A key lies somewhere in the left room with the "
        "agent. The agent must pick up the key, toggle the door open and reach the goal in the right room.")),
}

MINIGRID_ACTION_TEXT = (
    "TURN_LEFT and TURN_RIGHT rotate the agent in place. FORWARD moves one cell in the facing direction "
    "unless the cell ahead is a wall, a key or a locked door. PICKUP takes a key from the cell ahead. "
    "TOGGLE opens a locked door ahead while carrying the key. grid[y][x] holds the cell at column x, row y; "
    "NORTH is towards row 0. The observation shows the agent's pose and a 7x7 view in front of it: the "
    "agent sits at view[6][3] looking towards view row 0, and cells hidden behind walls or closed doors are UNSEEN."
)


def minigrid_scaffold(layout: GridLayout) -> GridValue:
    """Outer walls plus the layout's fixed interior walls and locked doors."""
    grid = GridValue.filled(CELL.name, layout.width, layout.height, CELL.index("EMPTY"))
    wall = EnumValue(CELL.name, CELL.index("WALL"))
    for x in range(layout.width):
        grid = grid.set(0, x, wall).set(layout.height - 1, x, wall)
    for y in range(layout.height):
        grid = grid.set(y, 0, wall).set(y, layout.width - 1, wall)
    for x, y in layout.walls:
        grid = grid.set(y, x, wall)
    for x, y in layout.locked_doors:
        grid = grid.set(y, x, EnumValue(CELL.name, CELL.index("DOOR_LOCKED")))
    return grid


def minigrid_schema(variant: str) -> DomainSchema:
    layout = MINIGRID_LAYOUTS[variant]
    state = RecordType("MiniGridState", (
        ("grid", GridType(CELL, layout.width, layout.height)),
        ("agent_x", IntType(0, layout.width - 1)),
        ("agent_y", IntType(0, layout.height - 1)),
        ("agent_dir", DIRECTION),
        ("carrying_key", BoolType()),
    ))
    observation = RecordType("MiniGridObservation", (
        ("agent_x", IntType(0, layout.width - 1)),
        ("agent_y", IntType(0, layout.height - 1)),
        ("agent_dir", DIRECTION),
        ("carrying_key", BoolType()),
        ("view", GridType(OBS_CELL, 7, 7)),
    ))
    context = default_value(state).replace("grid", minigrid_scaffold(layout))
    return DomainSchema(
        name=f"minigrid-{variant}",
        state=state,
        observation=observation,
        actions=MINIGRID_ACTIONS,
        description=f"{layout.description} {MINIGRID_ACTION_TEXT}",
        goal_description="Reach the goal square in as few steps as possible. Reaching the goal gives reward 1.",
        initial_context=context,
    )


def schema_for(env_id: str) -> DomainSchema:
    if env_id == "tiger":
        return tiger_schema()
    if env_id == "rocksample-4-4":
        return rocksample_schema()
    if env_id.startswith("minigrid-") and env_id[len("minigrid-"):] in MINIGRID_LAYOUTS:
        return minigrid_schema(env_id[len("minigrid-"):])
    raise UnknownEnvironment(f"unknown environment '{env_id}'", stage="environments",
                             context={"known": ", ".join(ENV_IDS)})


def program_path(env_id: str, component: str) -> Path:
    """Environment-specific program first, then the shared family program."""
    own = PROGRAM_DIR / env_id / f"{component}.pps"
    if own.exists():
        return own
    return PROGRAM_DIR / env_id.split("-")[0] / f"{component}.pps"


@lru_cache(maxsize=None)
def ground_truth(env_id: str) -> ModelSet:
    """The shipped ModelSet; the oracle plans with exactly these programs."""
    schema = schema_for(env_id)
    programs = {c: load_program(program_path(env_id, c), schema, c) for c in COMPONENTS}
    provenance = {c: Provenance("ground-truth", 1.0) for c in COMPONENTS}
    return ModelSet(schema, programs, provenance)


# ---------------------------------------------------------------------------
# Simulator
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class StepResult:
    next_state: RecordValue
    observation: RecordValue
    reward: float
    done: bool


class Environment:
    """Simulator driven by the ground-truth programs."""

    def __init__(self, env_id: str, models: ModelSet | None = None):
        self.env_id = env_id
        self.ground_truth = models or ground_truth(env_id)
        self.schema = self.ground_truth.schema
        self.rng = np.random.default_rng(0)
        self.state: RecordValue | None = None
        self.done = False
        self.steps = 0

    @property
    def n_actions(self) -> int:
        return len(self.schema.actions)

    def reset(self, seed: int) -> tuple[RecordValue, RecordValue]:
        self.rng = np.random.default_rng(seed)
        models = self.ground_truth
        self.state = models.sampler("initial").sample((self.schema.initial_context,), self.rng)
        observation = models.sampler("observation").sample(
            (self.state, NO_ACTION, self.schema.empty_observation), self.rng
        )
        self.done = False
        self.steps = 0
        return self.state, observation

    def step(self, action: int) -> StepResult:
        if self.state is None:
            raise StepAfterDone("step() before reset()", stage="environments")
        if self.done:
            raise StepAfterDone("episode already finished", stage="environments",
                                context={"env": self.env_id, "steps": self.steps})
        if not 0 <= action < self.n_actions:
            raise ValueError(f"invalid action {action} for {self.env_id}")
        models = self.ground_truth
        state = self.state
        next_state = models.sampler("transition").sample((state, action), self.rng)
        observation = models.sampler("observation").sample(
            (next_state, action, self.schema.empty_observation), self.rng
        )
        outcome = models.sampler("reward").sample((state, action, next_state), self.rng)
        self.state = next_state
        self.done = outcome["done"]
        self.steps += 1
        return StepResult(next_state, observation, outcome["reward"], outcome["done"])


def make_env(env_id: str) -> Environment:
    if env_id not in ENV_IDS:
        raise UnknownEnvironment(f"unknown environment '{env_id}'", stage="environments",
                                 context={"known": ", ".join(ENV_IDS)})
    return Environment(env_id)


# ---------------------------------------------------------------------------
# Search helpers
# ---------------------------------------------------------------------------


def _deterministic(models: ModelSet, component: str, inputs: tuple):
    table = models.sampler(component).support(inputs)
    if table is None or len(table) != 1:
        raise ValueError(f"{component} model is not deterministic on this input")
    return table.outcomes[0]


def shortest_path(models: ModelSet, state: RecordValue, max_depth: int = 500) -> list[int] | None:
    """Breadth-first action sequence to a rewarding terminal step, or None."""
    start = canonical_encode(state)
    parents: dict[bytes, tuple[bytes | None, int | None]] = {start: (None, None)}
    frontier = deque([(state, 0)])
    n_actions = len(models.schema.actions)
    while frontier:
        current, depth = frontier.popleft()
        if depth >= max_depth:
            continue
        key = canonical_encode(current)
        for a in range(n_actions):
            next_state = _deterministic(models, "transition", (current, a))
            outcome = _deterministic(models, "reward", (current, a, next_state))
            if outcome["done"] and outcome["reward"] > 0:
                path = [a]
                k = key
                while parents[k][0] is not None:
                    k, action = parents[k]
                    path.append(action)
                return path[::-1]
            if outcome["done"]:
                continue
            nk = canonical_encode(next_state)
            if nk not in parents:
                parents[nk] = (key, a)
                frontier.append((next_state, depth + 1))
    return None


def shortest_path_length(env_id: str, state: RecordValue) -> int | None:
    path = shortest_path(ground_truth(env_id), state)
    return None if path is None else len(path)


def enumerate_states(schema: DomainSchema, limit: int = 100_000) -> list[RecordValue]:
    """Every state of a finite schema (Tiger, RockSample)."""
    return list(enumerate_values(schema.state, limit))


# ---------------------------------------------------------------------------
# Demonstrators
# ---------------------------------------------------------------------------

Policy = Callable[[RecordValue, int], int]


def _tiger_demo(state: RecordValue, step: int) -> int:
    if step < 2:
        return 2
    return 1 if state["tiger_location"] == 0 else 0


def _rocksample_demo(state: RecordValue, step: int) -> int:
    if step < 4:
        return 5 + step
    x, y = state["agent_x"], state["agent_y"]
    for i in range(4):
        if not state[f"rock_{i}"]:
            continue
        if (x, y) == (ROCK_X[i], ROCK_Y[i]):
            return 4
        if x < ROCK_X[i]:
            return 2
        if x > ROCK_X[i]:
            return 3
        return 0 if y < ROCK_Y[i] else 1
    return 2


def _minigrid_demo(env_id: str) -> Policy:
    models = ground_truth(env_id)

    def policy(state: RecordValue, step: int) -> int:
        path = shortest_path(models, state)
        if not path:
            logger.warning("⚠️ No path to the goal from the current state; turning left")
            return 0
        return path[0]
    return policy


def demo_policy(env_id: str) -> Policy:
    """Scripted demonstrator acting on the true state."""
    if env_id == "tiger":
        return _tiger_demo
    if env_id == "rocksample-4-4":
        return _rocksample_demo
    if env_id in ENV_IDS:
        return _minigrid_demo(env_id)
    raise UnknownEnvironment(f"unknown environment '{env_id}'", stage="environments")


def collect_demos(env: Environment, policy: Policy, episodes: int, seed: int,
                  max_steps: int | None = None) -> Dataset:
    """Roll the policy out and keep full post-hoc states."""
    max_steps = max_steps or settings.defaults_for(env.env_id).max_steps
    records: list[TransitionRecord] = []
    for e in range(episodes):
        state, _ = env.reset(derive_seed(seed, e))
        for t in range(max_steps):
            action = policy(state, t)
            result = env.step(action)
            records.append(TransitionRecord(
                episode_id=e,
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
    logger.info("✅ Collected %d demo episode(s), %d transitions on %s", episodes, len(records), env.env_id)
    return Dataset(env.schema, tuple(records))
