import numpy as np
import pytest

from environments import collect_demos, demo_policy, ground_truth, make_env, schema_for
from pomdp_core import (
    BoolType,
    EnumType,
    EnumValue,
    GridType,
    GridValue,
    IntType,
    RealType,
    RecordType,
    RecordValue,
)
from pps_parser import (
    Assign,
    Attribute,
    AugAssign,
    BinOp,
    BoolLit,
    BoolOp,
    Call,
    Compare,
    For,
    If,
    IfExp,
    Name,
    Num,
    Pass,
    Program,
    Return,
    UnaryOp,
    parse,
    pretty_print,
)


@pytest.fixture
def tiger_schema():
    return schema_for("tiger")


@pytest.fixture
def tiger_models():
    return ground_truth("tiger")


@pytest.fixture
def empty_models():
    return ground_truth("minigrid-empty")


@pytest.fixture
def cache_dir(tmp_path):
    return tmp_path / "cache"


def tiger_demos(episodes: int = 10, seed: int = 0):
    return collect_demos(make_env("tiger"), demo_policy("tiger"), episodes, seed)


@pytest.fixture
def tiger_dataset():
    return tiger_demos(10, 0)


def tiger_state(location: int) -> RecordValue:
    return RecordValue("TigerState", (("tiger_location", location),))


def tiger_obs(schema, variant: str) -> RecordValue:
    enum = schema.observation.field_type("obs")
    return RecordValue("TigerObservation", (("obs", EnumValue(enum.name, enum.index(variant))),))


# ---------------------------------------------------------------------------
# Random values
# ---------------------------------------------------------------------------


def random_value(t, rng: np.random.Generator):
    if isinstance(t, IntType):
        return int(rng.integers(t.lo, t.hi + 1))
    if isinstance(t, BoolType):
        return bool(rng.integers(2))
    if isinstance(t, RealType):
        return float(rng.normal() * 10)
    if isinstance(t, EnumType):
        return EnumValue(t.name, int(rng.integers(len(t.variants))))
    if isinstance(t, GridType):
        cells = tuple(int(c) for c in rng.integers(len(t.cell.variants), size=t.width * t.height))
        return GridValue(t.cell.name, t.width, t.height, cells)
    return RecordValue(t.name, tuple((name, random_value(sub, rng)) for name, sub in t.fields))


# ---------------------------------------------------------------------------
# Random programs
# ---------------------------------------------------------------------------


class ProgramGenerator:
    """Random transition programs over the Tiger schema that the parser accepts.

    Never emits unary minus applied to a non-negative literal: the parser folds
    `-3` into a single literal, so that node shape cannot come back unchanged.
    """

    LEAVES = ("state.tiger_location", "action", "Action.LISTEN", "Action.OPEN_LEFT")

    def __init__(self, rng: np.random.Generator):
        self.rng = rng
        self.names: list[str] = []
        self.counter = 0

    def choice(self, options):
        return options[int(self.rng.integers(len(options)))]

    def leaf(self):
        kind = int(self.rng.integers(5))
        if kind == 0:
            return Num(int(self.rng.integers(-5, 20)))
        if kind == 1:
            return Num(float(self.rng.integers(0, 40)) / 4.0)
        if kind == 2:
            return BoolLit(bool(self.rng.integers(2)))
        if kind == 3 and self.names:
            return Name(self.choice(self.names))
        text = self.choice(self.LEAVES)
        base, _, attr = text.partition(".")
        return Attribute(Name(base), attr) if attr else Name(base)

    def expr(self, depth: int):
        if depth <= 0 or self.rng.random() < 0.25:
            return self.leaf()
        kind = int(self.rng.integers(7))
        if kind == 0:
            op = self.choice(["+", "-", "*", "//", "%", "/"])
            return BinOp(op, self.expr(depth - 1), self.expr(depth - 1))
        if kind == 1:
            op = self.choice(["==", "!=", "<", "<=", ">", ">="])
            return Compare(self.expr(depth - 1), (op,), (self.expr(depth - 1),))
        if kind == 2:
            n = int(self.rng.integers(2, 4))
            return BoolOp(self.choice(["and", "or"]), tuple(self.expr(depth - 1) for _ in range(n)))
        if kind == 3:
            operand = self.expr(depth - 1)
            if isinstance(operand, Num):
                return UnaryOp("not", operand)
            return UnaryOp(self.choice(["-", "not"]), operand)
        if kind == 4:
            return IfExp(self.expr(depth - 1), self.expr(depth - 1), self.expr(depth - 1))
        if kind == 5:
            func = self.choice(["abs", "min", "max"])
            n = 1 if func == "abs" else 2
            return Call(func, tuple(self.expr(depth - 1) for _ in range(n)))
        return self.leaf()

    def fresh(self) -> str:
        self.counter += 1
        return f"v{self.counter}"

    def stmts(self, depth: int, count: int):
        out = []
        for _ in range(count):
            kind = int(self.rng.integers(5))
            if kind == 0 and depth > 0:
                out.append(If(self.expr(2), self.stmts(depth - 1, 2),
                              self.stmts(depth - 1, 1) if self.rng.random() < 0.6 else ()))
            elif kind == 1 and depth > 0:
                var = self.fresh()
                self.names.append(var)
                out.append(For(var, (Num(int(self.rng.integers(0, 4))),), self.stmts(depth - 1, 1)))
            elif kind == 2 and self.names:
                out.append(AugAssign(Name(self.choice(self.names)), self.choice(["+", "-", "*"]), self.expr(2)))
            elif kind == 3:
                out.append(Pass())
            else:
                value = self.expr(3)
                var = self.fresh()
                out.append(Assign(Name(var), value))
                self.names.append(var)
        return tuple(out)

    def program(self, schema) -> Program:
        self.names = []
        body = self.stmts(3, int(self.rng.integers(1, 5))) + (Return(Name("state")),)
        skeleton = Program("transition", "transition_func", ("state", "action"), body, 0, ())
        return parse(pretty_print(skeleton), "transition", schema)
