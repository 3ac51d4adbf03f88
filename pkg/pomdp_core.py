"""
Core POMDP Types for the Model Induction Toolkit
Domain schemas, tagged values, transition records, JSONL dataset persistence
and episode-level train/test splitting shared by every other module.
"""

from __future__ import annotations

import itertools
import json
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Union

import numpy as np

logger = logging.getLogger(__name__)

# Action index handed to the observation program for the reset observation
NO_ACTION = -1

COMPONENTS = ("initial", "transition", "observation", "reward")


class PomdpCoderError(Exception):
    """Base exception for the toolkit; carries the stage and context it failed in."""

    def __init__(
        self,
        message: str,
        *,
        stage: str | None = None,
        context: dict | None = None,
        cause: Exception | None = None,
    ):
        super().__init__(message)
        self.message = message
        self.stage = stage
        self.context = context or {}
        self.cause = cause

    def __str__(self) -> str:
        parts = [self.message]
        if self.stage:
            parts.append(f"stage: {self.stage}")
        if self.context:
            parts.append(", ".join(f"{k}={v}" for k, v in self.context.items()))
        if self.cause:
            parts.append(f"cause: {self.cause}")
        return " | ".join(parts)


class SchemaError(PomdpCoderError):
    """Raised when a DomainSchema violates its own invariants."""


class DatasetError(PomdpCoderError):
    """Raised when a dataset file cannot be read back; names the line and field."""

    def __init__(self, message: str, *, line: int | None = None, field_name: str | None = None):
        context = {}
        if line is not None:
            context["line"] = line
        if field_name is not None:
            context["field"] = field_name
        super().__init__(message, stage="dataset", context=context)
        self.line = line
        self.field_name = field_name


class InsufficientEpisodes(PomdpCoderError):
    """Raised when a dataset has too few episodes to split."""


# ---------------------------------------------------------------------------
# Schema types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class IntType:
    lo: int
    hi: int


@dataclass(frozen=True)
class BoolType:
    pass


@dataclass(frozen=True)
class RealType:
    """Only used for reward outputs; states and observations stay discrete."""


@dataclass(frozen=True)
class EnumType:
    name: str
    variants: tuple[str, ...]

    def index(self, variant: str) -> int:
        return self.variants.index(variant)


@dataclass(frozen=True)
class GridType:
    cell: EnumType
    width: int
    height: int


@dataclass(frozen=True)
class RecordType:
    name: str
    fields: tuple[tuple[str, "FieldType"], ...]

    def field_type(self, name: str) -> "FieldType | None":
        for field_name, field_type in self.fields:
            if field_name == name:
                return field_type
        return None

    @property
    def field_names(self) -> tuple[str, ...]:
        return tuple(name for name, _ in self.fields)


FieldType = Union[IntType, BoolType, RealType, EnumType, GridType, RecordType]


# ---------------------------------------------------------------------------
# Values
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EnumValue:
    enum: str
    index: int


@dataclass(frozen=True)
class GridValue:
    """Row-major grid of enum cells; cells[row * width + col]."""

    enum: str
    width: int
    height: int
    cells: tuple[int, ...]
    _hash: int | None = field(default=None, compare=False, repr=False)
    _encoded: bytes | None = field(default=None, compare=False, repr=False)

    def __hash__(self) -> int:
        if self._hash is None:
            object.__setattr__(self, "_hash", hash((self.enum, self.width, self.height, self.cells)))
        return self._hash

    @classmethod
    def filled(cls, enum: str, width: int, height: int, index: int = 0) -> "GridValue":
        return cls(enum, width, height, (index,) * (width * height))

    def in_bounds(self, row: int, col: int) -> bool:
        return 0 <= row < self.height and 0 <= col < self.width

    def get(self, row: int, col: int) -> EnumValue:
        return EnumValue(self.enum, self.cells[row * self.width + col])

    def set(self, row: int, col: int, value: EnumValue) -> "GridValue":
        cells = list(self.cells)
        cells[row * self.width + col] = value.index
        return GridValue(self.enum, self.width, self.height, tuple(cells))

    def rows(self) -> list[tuple[int, ...]]:
        return [self.cells[r * self.width:(r + 1) * self.width] for r in range(self.height)]


@dataclass(frozen=True)
class RecordValue:
    name: str
    fields: tuple[tuple[str, "Value"], ...]
    _hash: int | None = field(default=None, compare=False, repr=False)
    _encoded: bytes | None = field(default=None, compare=False, repr=False)

    def __hash__(self) -> int:
        if self._hash is None:
            object.__setattr__(self, "_hash", hash((self.name, self.fields)))
        return self._hash

    def __getitem__(self, name: str) -> "Value":
        for field_name, value in self.fields:
            if field_name == name:
                return value
        raise KeyError(name)

    def has(self, name: str) -> bool:
        return any(field_name == name for field_name, _ in self.fields)

    def replace(self, name: str, value: "Value") -> "RecordValue":
        if not self.has(name):
            raise KeyError(name)
        return RecordValue(
            self.name,
            tuple((n, value if n == name else v) for n, v in self.fields),
        )

    def as_dict(self) -> dict[str, "Value"]:
        return dict(self.fields)


Value = Union[int, bool, float, EnumValue, GridValue, RecordValue]


REWARD_TYPE = RecordType("Reward", (("reward", RealType()), ("done", BoolType())))


def reward_value(reward: float, done: bool) -> RecordValue:
    return RecordValue("Reward", (("reward", float(reward)), ("done", bool(done))))


# ---------------------------------------------------------------------------
# Domain schema
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DomainSchema:
    name: str
    state: RecordType
    observation: RecordType
    actions: tuple[str, ...]
    description: str = ""
    goal_description: str = ""
    initial_context: RecordValue | None = None
    empty_observation: RecordValue | None = None

    def __post_init__(self):
        if len(set(self.actions)) != len(self.actions):
            raise SchemaError(f"Duplicate action names in schema '{self.name}'")
        if not self.actions:
            raise SchemaError(f"Schema '{self.name}' declares no actions")
        for record in (self.state, self.observation):
            _check_type(record, f"{self.name}.{record.name}")
        enums: dict[str, EnumType] = {}
        for enum in _collect_enums(self.state) + _collect_enums(self.observation):
            if enums.get(enum.name, enum) != enum:
                raise SchemaError(f"Enum '{enum.name}' declared twice with different variants")
            enums[enum.name] = enum
        object.__setattr__(self, "_enums", enums)
        if self.initial_context is None:
            object.__setattr__(self, "initial_context", default_value(self.state))
        if self.empty_observation is None:
            object.__setattr__(self, "empty_observation", default_value(self.observation))
        if not validate(self.initial_context, self.state):
            raise SchemaError(f"initial_context does not conform to {self.state.name}")
        if not validate(self.empty_observation, self.observation):
            raise SchemaError(f"empty_observation does not conform to {self.observation.name}")

    @property
    def enums(self) -> dict[str, EnumType]:
        return self._enums  # type: ignore[attr-defined]

    @property
    def records(self) -> dict[str, RecordType]:
        return {self.state.name: self.state, self.observation.name: self.observation}

    def action_index(self, name: str) -> int:
        return self.actions.index(name)

    def variant_name(self, value: EnumValue) -> str:
        return self.enums[value.enum].variants[value.index]


def _check_type(t: FieldType, where: str) -> None:
    if isinstance(t, IntType):
        if t.lo > t.hi:
            raise SchemaError(f"{where}: int range lo > hi")
    elif isinstance(t, EnumType):
        if not t.variants:
            raise SchemaError(f"{where}: enum '{t.name}' has no variants")
        if len(set(t.variants)) != len(t.variants):
            raise SchemaError(f"{where}: enum '{t.name}' has duplicate variants")
    elif isinstance(t, GridType):
        if t.width <= 0 or t.height <= 0:
            raise SchemaError(f"{where}: grid dimensions must be positive")
        _check_type(t.cell, where)
    elif isinstance(t, RecordType):
        names = t.field_names
        if len(set(names)) != len(names):
            raise SchemaError(f"{where}: duplicate field names")
        for name, sub in t.fields:
            _check_type(sub, f"{where}.{name}")


def _collect_enums(t: FieldType) -> list[EnumType]:
    if isinstance(t, EnumType):
        return [t]
    if isinstance(t, GridType):
        return [t.cell]
    if isinstance(t, RecordType):
        return [e for _, sub in t.fields for e in _collect_enums(sub)]
    return []


def default_value(t: FieldType) -> Value:
    """Lowest value of a type: int lo, False, first variant, grid of first variant."""
    if isinstance(t, IntType):
        return t.lo
    if isinstance(t, BoolType):
        return False
    if isinstance(t, RealType):
        return 0.0
    if isinstance(t, EnumType):
        return EnumValue(t.name, 0)
    if isinstance(t, GridType):
        return GridValue.filled(t.cell.name, t.width, t.height, 0)
    return RecordValue(t.name, tuple((name, default_value(sub)) for name, sub in t.fields))


# ---------------------------------------------------------------------------
# validate / canonical encoding
# ---------------------------------------------------------------------------


def validate(value: object, t: FieldType) -> bool:
    """True iff value structurally conforms to the schema type."""
    if isinstance(t, IntType):
        return type(value) is int and t.lo <= value <= t.hi
    if isinstance(t, BoolType):
        return type(value) is bool
    if isinstance(t, RealType):
        return type(value) in (int, float) and math.isfinite(value)
    if isinstance(t, EnumType):
        return isinstance(value, EnumValue) and value.enum == t.name and 0 <= value.index < len(t.variants)
    if isinstance(t, GridType):
        if not isinstance(value, GridValue):
            return False
        if value.enum != t.cell.name or value.width != t.width or value.height != t.height:
            return False
        if len(value.cells) != t.width * t.height:
            return False
        n = len(t.cell.variants)
        return all(type(c) is int and 0 <= c < n for c in value.cells)
    if isinstance(t, RecordType):
        if not isinstance(value, RecordValue) or value.name != t.name:
            return False
        if len(value.fields) != len(t.fields):
            return False
        for (name, sub_value), (type_name, sub_type) in zip(value.fields, t.fields):
            if name != type_name or not validate(sub_value, sub_type):
                return False
        return True
    return False


def _encode_text(text: str) -> bytes:
    raw = text.encode("utf-8")
    return struct.pack(">I", len(raw)) + raw


def canonical_encode(value: Value) -> bytes:
    """Self-delimiting tagged encoding; injective and stable across runs."""
    if isinstance(value, bool):
        return b"B\x01" if value else b"B\x00"
    if isinstance(value, int):
        return b"I" + struct.pack(">q", value)
    if isinstance(value, float):
        return b"R" + struct.pack(">d", value)
    if isinstance(value, EnumValue):
        return b"E" + _encode_text(value.enum) + struct.pack(">I", value.index)
    if isinstance(value, GridValue):
        if value._encoded is None:
            encoded = (
                b"G"
                + _encode_text(value.enum)
                + struct.pack(">II", value.width, value.height)
                + struct.pack(f">{len(value.cells)}H", *value.cells)
            )
            object.__setattr__(value, "_encoded", encoded)
        return value._encoded
    if isinstance(value, RecordValue):
        if value._encoded is None:
            parts = [b"C", _encode_text(value.name), struct.pack(">I", len(value.fields))]
            for name, sub in value.fields:
                parts.append(_encode_text(name))
                parts.append(canonical_encode(sub))
            object.__setattr__(value, "_encoded", b"".join(parts))
        return value._encoded
    raise TypeError(f"Cannot encode {type(value).__name__}")


def encode_inputs(inputs: Iterable[Value]) -> bytes:
    """Canonical key for a tuple of program inputs (model conditions)."""
    items = list(inputs)
    return struct.pack(">I", len(items)) + b"".join(canonical_encode(v) for v in items)


def canonical_decode(data: bytes) -> Value:
    value, offset = _decode_at(data, 0)
    if offset != len(data):
        raise ValueError("Trailing bytes after canonical value")
    return value


def _decode_text(data: bytes, offset: int) -> tuple[str, int]:
    (length,) = struct.unpack_from(">I", data, offset)
    offset += 4
    return data[offset:offset + length].decode("utf-8"), offset + length


def _decode_at(data: bytes, offset: int) -> tuple[Value, int]:
    tag = data[offset:offset + 1]
    offset += 1
    if tag == b"B":
        return data[offset] == 1, offset + 1
    if tag == b"I":
        return struct.unpack_from(">q", data, offset)[0], offset + 8
    if tag == b"R":
        return struct.unpack_from(">d", data, offset)[0], offset + 8
    if tag == b"E":
        name, offset = _decode_text(data, offset)
        return EnumValue(name, struct.unpack_from(">I", data, offset)[0]), offset + 4
    if tag == b"G":
        name, offset = _decode_text(data, offset)
        width, height = struct.unpack_from(">II", data, offset)
        offset += 8
        n = width * height
        cells = struct.unpack_from(f">{n}H", data, offset)
        return GridValue(name, width, height, tuple(cells)), offset + 2 * n
    if tag == b"C":
        name, offset = _decode_text(data, offset)
        (count,) = struct.unpack_from(">I", data, offset)
        offset += 4
        fields = []
        for _ in range(count):
            field_name, offset = _decode_text(data, offset)
            sub, offset = _decode_at(data, offset)
            fields.append((field_name, sub))
        return RecordValue(name, tuple(fields)), offset
    raise ValueError(f"Unknown tag {tag!r} at offset {offset - 1}")


def enumerate_values(t: FieldType, limit: int = 1_000_000) -> Iterator[Value]:
    """Every valid value of a finite type, in a fixed order.

    Grids are enumerable in principle but explode immediately; anything whose
    count exceeds `limit` raises ValueError instead of iterating.
    """
    if count_values(t) > limit:
        raise ValueError(f"Type has more than {limit} values")
    yield from _enumerate(t)


def count_values(t: FieldType) -> int:
    if isinstance(t, IntType):
        return t.hi - t.lo + 1
    if isinstance(t, BoolType):
        return 2
    if isinstance(t, EnumType):
        return len(t.variants)
    if isinstance(t, GridType):
        return len(t.cell.variants) ** (t.width * t.height)
    if isinstance(t, RecordType):
        return math.prod(count_values(sub) for _, sub in t.fields)
    raise ValueError("Real-valued types are not enumerable")


def _enumerate(t: FieldType) -> Iterator[Value]:
    if isinstance(t, IntType):
        yield from range(t.lo, t.hi + 1)
    elif isinstance(t, BoolType):
        yield False
        yield True
    elif isinstance(t, EnumType):
        for i in range(len(t.variants)):
            yield EnumValue(t.name, i)
    elif isinstance(t, GridType):
        for cells in itertools.product(range(len(t.cell.variants)), repeat=t.width * t.height):
            yield GridValue(t.cell.name, t.width, t.height, tuple(cells))
    elif isinstance(t, RecordType):
        names = t.field_names
        for combo in itertools.product(*(list(_enumerate(sub)) for _, sub in t.fields)):
            yield RecordValue(t.name, tuple(zip(names, combo)))


def derive_seed(*parts: int) -> int:
    """Stable child seed from a parent seed and indices (schedule-independent)."""
    entropy = [int(p) % (2 ** 32) for p in parts]
    return int(np.random.SeedSequence(entropy).generate_state(1, dtype=np.uint64)[0] >> 1)


# ---------------------------------------------------------------------------
# JSON rendering of types and values
# ---------------------------------------------------------------------------


def type_to_json(t: FieldType) -> dict:
    if isinstance(t, IntType):
        return {"kind": "int", "lo": t.lo, "hi": t.hi}
    if isinstance(t, BoolType):
        return {"kind": "bool"}
    if isinstance(t, RealType):
        return {"kind": "real"}
    if isinstance(t, EnumType):
        return {"kind": "enum", "name": t.name, "variants": list(t.variants)}
    if isinstance(t, GridType):
        return {"kind": "grid", "cell": type_to_json(t.cell), "width": t.width, "height": t.height}
    return {"kind": "record", "name": t.name, "fields": [[n, type_to_json(s)] for n, s in t.fields]}


def type_from_json(obj: dict) -> FieldType:
    kind = obj.get("kind")
    if kind == "int":
        return IntType(int(obj["lo"]), int(obj["hi"]))
    if kind == "bool":
        return BoolType()
    if kind == "real":
        return RealType()
    if kind == "enum":
        return EnumType(obj["name"], tuple(obj["variants"]))
    if kind == "grid":
        cell = type_from_json(obj["cell"])
        if not isinstance(cell, EnumType):
            raise SchemaError("Grid cells must be an enum")
        return GridType(cell, int(obj["width"]), int(obj["height"]))
    if kind == "record":
        return RecordType(obj["name"], tuple((n, type_from_json(s)) for n, s in obj["fields"]))
    raise SchemaError(f"Unknown type kind '{kind}'")


def value_to_json(value: Value, t: FieldType):
    if isinstance(t, EnumType):
        return t.variants[value.index]
    if isinstance(t, GridType):
        return [[t.cell.variants[c] for c in row] for row in value.rows()]
    if isinstance(t, RecordType):
        return {name: value_to_json(value[name], sub) for name, sub in t.fields}
    if isinstance(t, RealType):
        return float(value)
    return value


def value_from_json(obj, t: FieldType, where: str) -> Value:
    """Inverse of value_to_json; raises DatasetError naming the offending field."""
    if isinstance(t, IntType):
        if type(obj) is not int or not t.lo <= obj <= t.hi:
            raise DatasetError(f"expected int in [{t.lo}, {t.hi}], got {obj!r}", field_name=where)
        return obj
    if isinstance(t, BoolType):
        if type(obj) is not bool:
            raise DatasetError(f"expected bool, got {obj!r}", field_name=where)
        return obj
    if isinstance(t, RealType):
        if type(obj) not in (int, float) or not math.isfinite(obj):
            raise DatasetError(f"expected finite number, got {obj!r}", field_name=where)
        return float(obj)
    if isinstance(t, EnumType):
        if obj not in t.variants:
            raise DatasetError(f"unknown {t.name} variant {obj!r}", field_name=where)
        return EnumValue(t.name, t.variants.index(obj))
    if isinstance(t, GridType):
        if not isinstance(obj, list) or len(obj) != t.height:
            raise DatasetError(f"expected {t.height} grid rows", field_name=where)
        cells: list[int] = []
        for r, row in enumerate(obj):
            if not isinstance(row, list) or len(row) != t.width:
                raise DatasetError(f"expected {t.width} cells in row {r}", field_name=where)
            for cell in row:
                if cell not in t.cell.variants:
                    raise DatasetError(f"unknown {t.cell.name} variant {cell!r}", field_name=where)
                cells.append(t.cell.variants.index(cell))
        return GridValue(t.cell.name, t.width, t.height, tuple(cells))
    if not isinstance(obj, dict):
        raise DatasetError(f"expected object for {t.name}", field_name=where)
    if list(obj.keys()) != list(t.field_names):
        raise DatasetError(
            f"fields {list(obj.keys())} do not match {list(t.field_names)}", field_name=where
        )
    return RecordValue(
        t.name, tuple((n, value_from_json(obj[n], s, f"{where}.{n}")) for n, s in t.fields)
    )


def schema_to_json(schema: DomainSchema) -> dict:
    return {
        "name": schema.name,
        "description": schema.description,
        "goal_description": schema.goal_description,
        "actions": list(schema.actions),
        "state": type_to_json(schema.state),
        "observation": type_to_json(schema.observation),
        "initial_context": value_to_json(schema.initial_context, schema.state),
        "empty_observation": value_to_json(schema.empty_observation, schema.observation),
    }


def schema_from_json(obj: dict) -> DomainSchema:
    state = type_from_json(obj["state"])
    observation = type_from_json(obj["observation"])
    if not isinstance(state, RecordType) or not isinstance(observation, RecordType):
        raise SchemaError("state and observation must be records")
    return DomainSchema(
        name=obj["name"],
        state=state,
        observation=observation,
        actions=tuple(obj["actions"]),
        description=obj.get("description", ""),
        goal_description=obj.get("goal_description", ""),
        initial_context=value_from_json(obj["initial_context"], state, "initial_context"),
        empty_observation=value_from_json(obj["empty_observation"], observation, "empty_observation"),
    )


def render_value(value: Value, schema: DomainSchema) -> str:
    """Python-like rendering used in prompts and logs."""
    if isinstance(value, bool):
        return "True" if value else "False"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, int):
        return str(value)
    if isinstance(value, EnumValue):
        return f"{value.enum}.{schema.variant_name(value)}"
    if isinstance(value, GridValue):
        variants = schema.enums[value.enum].variants
        rows = ["[" + ", ".join(variants[c] for c in row) + "]" for row in value.rows()]
        return "[" + ", ".join(rows) + "]"
    inner = ", ".join(f"{n}={render_value(v, schema)}" for n, v in value.fields)
    return f"{value.name}({inner})"


# ---------------------------------------------------------------------------
# Records and datasets
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TransitionRecord:
    episode_id: int
    step: int
    state: RecordValue
    action: int
    observation: RecordValue
    reward: float
    next_state: RecordValue
    done: bool


def check_record(record: TransitionRecord, schema: DomainSchema, steps: dict[int, int]) -> None:
    """Validate one record against the schema; steps tracks the next expected step per episode."""
    where = f"episode {record.episode_id} step {record.step}"
    if record.episode_id < 0:
        raise DatasetError(f"negative episode id in {where}", field_name="episode")
    if not validate(record.state, schema.state):
        raise DatasetError(f"state does not conform in {where}", field_name="state")
    if not validate(record.next_state, schema.state):
        raise DatasetError(f"next_state does not conform in {where}", field_name="next_state")
    if not validate(record.observation, schema.observation):
        raise DatasetError(f"observation does not conform in {where}", field_name="observation")
    if not 0 <= record.action < len(schema.actions):
        raise DatasetError(f"invalid action in {where}", field_name="action")
    expected = steps.get(record.episode_id, 0)
    if record.step != expected:
        raise DatasetError(f"non-contiguous steps in {where}", field_name="step")
    steps[record.episode_id] = expected + 1


@dataclass(frozen=True)
class Dataset:
    schema: DomainSchema
    records: tuple[TransitionRecord, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "records", tuple(self.records))
        steps: dict[int, int] = {}
        for record in self.records:
            check_record(record, self.schema, steps)

    def __len__(self) -> int:
        return len(self.records)

    @property
    def episode_ids(self) -> list[int]:
        return sorted({r.episode_id for r in self.records})

    def episodes(self) -> dict[int, list[TransitionRecord]]:
        grouped: dict[int, list[TransitionRecord]] = {}
        for record in self.records:
            grouped.setdefault(record.episode_id, []).append(record)
        return grouped

    def select(self, episode_ids: Iterable[int]) -> "Dataset":
        keep = set(episode_ids)
        return Dataset(self.schema, tuple(r for r in self.records if r.episode_id in keep))

    def next_episode_id(self) -> int:
        ids = self.episode_ids
        return ids[-1] + 1 if ids else 0

    def append_episode(self, records: Iterable[TransitionRecord]) -> "Dataset":
        """New dataset with one more episode, renumbered to the next free id."""
        episode_id = self.next_episode_id()
        renumbered = tuple(
            TransitionRecord(
                episode_id, r.step, r.state, r.action, r.observation, r.reward, r.next_state, r.done
            )
            for r in records
        )
        return Dataset(self.schema, self.records + renumbered)


def split_dataset(d: Dataset, test_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Split whole episodes into train/test; deterministic given seed."""
    if not 0 < test_fraction < 1:
        raise ValueError("test_fraction must lie strictly between 0 and 1")
    ids = d.episode_ids
    if len(ids) < 2:
        raise InsufficientEpisodes("insufficient episodes", stage="split", context={"episodes": len(ids)})
    n_test = int(math.floor(len(ids) * test_fraction + 0.5))
    n_test = min(max(n_test, 1), len(ids) - 1)
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(ids))
    test_ids = {ids[i] for i in order[:n_test]}
    train_ids = [i for i in ids if i not in test_ids]
    return d.select(train_ids), d.select(test_ids)


# ---------------------------------------------------------------------------
# JSONL persistence
# ---------------------------------------------------------------------------

RECORD_KEYS = ["episode", "step", "state", "action", "observation", "reward", "next_state", "done"]


def record_to_json(record: TransitionRecord, schema: DomainSchema) -> dict:
    return {
        "episode": record.episode_id,
        "step": record.step,
        "state": value_to_json(record.state, schema.state),
        "action": record.action,
        "observation": value_to_json(record.observation, schema.observation),
        "reward": float(record.reward),
        "next_state": value_to_json(record.next_state, schema.state),
        "done": record.done,
    }


def save_dataset(d: Dataset, path: str | Path) -> Path:
    """Header line with the schema, then one TransitionRecord per line."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        f.write(json.dumps(schema_to_json(d.schema), sort_keys=False) + "\n")
        for record in d.records:
            f.write(json.dumps(record_to_json(record, d.schema), allow_nan=False) + "\n")
    logger.info("💾 Saved %d record(s) to %s", len(d.records), path)
    return path


def load_dataset(path: str | Path) -> Dataset:
    path = Path(path)
    with open(path, "r", encoding="utf-8") as f:
        lines = f.read().splitlines()
    if not lines:
        raise DatasetError("missing schema header", line=1)
    try:
        schema = schema_from_json(json.loads(lines[0]))
    except (json.JSONDecodeError, KeyError, TypeError) as e:
        raise DatasetError(f"invalid schema header: {e}", line=1) from e

    records = []
    steps: dict[int, int] = {}
    for line_no, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        record = _record_from_line(line, line_no, schema)
        try:
            check_record(record, schema, steps)
        except DatasetError as e:
            raise DatasetError(e.message, line=line_no, field_name=e.field_name) from e
        records.append(record)
    return Dataset(schema, tuple(records))


def _record_from_line(line: str, line_no: int, schema: DomainSchema) -> TransitionRecord:
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as e:
        raise DatasetError(f"malformed JSON: {e.msg}", line=line_no) from e
    if not isinstance(obj, dict):
        raise DatasetError("record must be a JSON object", line=line_no)
    if list(obj.keys()) != RECORD_KEYS:
        missing = [k for k in RECORD_KEYS if k not in obj]
        extra = [k for k in obj if k not in RECORD_KEYS]
        name = (missing or extra or ["keys"])[0]
        raise DatasetError(f"record keys must be exactly {RECORD_KEYS}", line=line_no, field_name=name)
    try:
        for key in ("episode", "step", "action"):
            if type(obj[key]) is not int:
                raise DatasetError(f"expected int, got {obj[key]!r}", field_name=key)
        if type(obj["done"]) is not bool:
            raise DatasetError(f"expected bool, got {obj['done']!r}", field_name="done")
        reward = obj["reward"]
        if type(reward) not in (int, float) or not math.isfinite(reward):
            raise DatasetError(f"expected finite number, got {reward!r}", field_name="reward")
        return TransitionRecord(
            episode_id=obj["episode"],
            step=obj["step"],
            state=value_from_json(obj["state"], schema.state, "state"),
            action=obj["action"],
            observation=value_from_json(obj["observation"], schema.observation, "observation"),
            reward=float(reward),
            next_state=value_from_json(obj["next_state"], schema.state, "next_state"),
            done=obj["done"],
        )
    except DatasetError as e:
        raise DatasetError(e.message, line=line_no, field_name=e.field_name) from e
