"""
Probabilistic Program Runtime
Runs parsed model programs, enumerates their exact output distributions and
caches both behind a ProgramSampler.

Programs are compiled once into nested closures. Randomness only enters through
`sample(name, dist)` sites, which call into a chooser: a seeded RNG for `run`,
a replaying path walker for `enumerate_support`.
"""

from __future__ import annotations

import bisect
import logging
import math
import operator
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from pomdp_core import (
    EnumValue,
    GridValue,
    RecordValue,
    Value,
    canonical_encode,
    reward_value,
    validate,
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
    ExprStmt,
    For,
    If,
    IfExp,
    ListExpr,
    Name,
    Num,
    Pass,
    PpsRuntimeError,
    Program,
    Return,
    Str,
    Subscript,
    TupleExpr,
    UnaryOp,
    assigned_names,
)

logger = logging.getLogger(__name__)

DEFAULT_MAX_SITES = 16
DEFAULT_MAX_PATHS = 100_000
MAX_GRID_CELLS = 10_000


# ---------------------------------------------------------------------------
# Distributions
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Bernoulli:
    p: float

    def support(self) -> list[tuple[Value, float]]:
        return [(v, q) for v, q in ((True, self.p), (False, 1.0 - self.p)) if q > 0]

    def sample(self, rng: np.random.Generator) -> bool:
        return bool(rng.random() < self.p)


@dataclass(frozen=True)
class Categorical:
    weights: tuple[float, ...]

    def support(self) -> list[tuple[Value, float]]:
        total = sum(self.weights)
        return [(i, w / total) for i, w in enumerate(self.weights) if w > 0]

    def sample(self, rng: np.random.Generator) -> int:
        p = np.asarray(self.weights, dtype=float)
        return int(rng.choice(len(p), p=p / p.sum()))


@dataclass(frozen=True)
class UniformInt:
    lo: int
    hi: int

    def support(self) -> list[tuple[Value, float]]:
        n = self.hi - self.lo + 1
        return [(v, 1.0 / n) for v in range(self.lo, self.hi + 1)]

    def sample(self, rng: np.random.Generator) -> int:
        return int(rng.integers(self.lo, self.hi + 1))


def _number(x) -> bool:
    return type(x) in (int, float) and math.isfinite(x)


def _make_bernoulli(p) -> Bernoulli:
    if type(p) is bool or not _number(p) or not 0.0 <= p <= 1.0:
        raise PpsRuntimeError(f"Bernoulli probability must be in [0, 1], got {p!r}")
    return Bernoulli(float(p))


def _make_categorical(weights) -> Categorical:
    if not isinstance(weights, tuple) or not weights:
        raise PpsRuntimeError("Categorical needs a non-empty list of weights")
    if not all(_number(w) and w >= 0 for w in weights) or sum(weights) <= 0:
        raise PpsRuntimeError(f"Categorical weights must be non-negative with a positive sum, got {list(weights)}")
    return Categorical(tuple(float(w) for w in weights))


def _make_uniform(lo, hi) -> UniformInt:
    if type(lo) is not int or type(hi) is not int or lo > hi:
        raise PpsRuntimeError(f"UniformInt needs integer bounds lo <= hi, got ({lo!r}, {hi!r})")
    return UniformInt(lo, hi)


# ---------------------------------------------------------------------------
# Compilation
# ---------------------------------------------------------------------------


class _Return(Exception):
    def __init__(self, value):
        self.value = value


class _Frame:
    __slots__ = ("vars", "chooser", "steps", "bound")

    def __init__(self, variables: dict, chooser, bound: int):
        self.vars = variables
        self.chooser = chooser
        self.steps = 0
        self.bound = bound


class _GridRow:
    __slots__ = ("grid", "row")

    def __init__(self, grid: GridValue, row: int):
        self.grid = grid
        self.row = row


def _pow(a, b):
    if type(a) is int and type(b) is int and abs(b) > 1024:
        raise PpsRuntimeError("integer exponent too large")
    return a ** b


BIN_FUNCS = {
    "+": operator.add, "-": operator.sub, "*": operator.mul, "/": operator.truediv,
    "//": operator.floordiv, "%": operator.mod, "**": _pow,
}
CMP_FUNCS = {
    "==": operator.eq, "!=": operator.ne, "<": operator.lt, "<=": operator.le,
    ">": operator.gt, ">=": operator.ge,
    "in": lambda a, b: a in b, "not in": lambda a, b: a not in b,
}


def _index(container, i):
    if type(i) is not int:
        raise PpsRuntimeError(f"index must be an int, got {i!r}")
    if isinstance(container, GridValue):
        if not 0 <= i < container.height:
            raise PpsRuntimeError(f"grid row {i} out of bounds (height {container.height})")
        return _GridRow(container, i)
    if isinstance(container, _GridRow):
        grid = container.grid
        if not 0 <= i < grid.width:
            raise PpsRuntimeError(f"grid column {i} out of bounds (width {grid.width})")
        return EnumValue(grid.enum, grid.cells[container.row * grid.width + i])
    if isinstance(container, tuple):
        if not 0 <= i < len(container):
            raise PpsRuntimeError(f"list index {i} out of range (length {len(container)})")
        return container[i]
    raise PpsRuntimeError(f"cannot index into {type(container).__name__}")


def _attribute(base, attr: str):
    if isinstance(base, RecordValue):
        try:
            return base[attr]
        except KeyError:
            raise PpsRuntimeError(f"{base.name} has no field '{attr}'") from None
    if isinstance(base, GridValue) and attr in ("width", "height"):
        return base.width if attr == "width" else base.height
    raise PpsRuntimeError(f"cannot read '{attr}' from {type(base).__name__}")


def _to_int(x):
    if isinstance(x, EnumValue):
        return x.index
    return int(x)


class _Compiler:
    def __init__(self, program: Program):
        self.program = program
        self.schema = program.schema
        self.locals = set(program.params) | set(assigned_names(program.body))

    # -- statements ---------------------------------------------------------

    def block(self, stmts) -> Callable[[_Frame], None]:
        compiled = [self.stmt(s) for s in stmts]
        if len(compiled) == 1:
            return compiled[0]

        def run_block(fr):
            for s in compiled:
                s(fr)
        return run_block

    def stmt(self, node) -> Callable[[_Frame], None]:
        inner = self._stmt(node)

        def counted(fr):
            fr.steps += 1
            if fr.steps > fr.bound:
                raise PpsRuntimeError("static step bound exceeded")
            inner(fr)
        return counted

    def _stmt(self, node):
        if isinstance(node, Assign):
            value = self.expr(node.value)
            store = self.store(node.target)
            return lambda fr: store(fr, value(fr))
        if isinstance(node, AugAssign):
            current = self.expr(node.target)
            value = self.expr(node.value)
            store = self.store(node.target)
            op = BIN_FUNCS[node.op]
            return lambda fr: store(fr, op(current(fr), value(fr)))
        if isinstance(node, If):
            test = self.expr(node.test)
            body = self.block(node.body)
            orelse = self.block(node.orelse) if node.orelse else None

            def run_if(fr):
                if test(fr):
                    body(fr)
                elif orelse is not None:
                    orelse(fr)
            return run_if
        if isinstance(node, For):
            args = [self.expr(a) for a in node.args]
            body = self.block(node.body)
            var = node.var

            def run_for(fr):
                bounds = [a(fr) for a in args]
                if any(type(b) is not int for b in bounds):
                    raise PpsRuntimeError("range bounds must be ints")
                variables = fr.vars
                for i in range(*bounds):
                    variables[var] = i
                    body(fr)
            return run_for
        if isinstance(node, Return):
            value = self.expr(node.value)

            def run_return(fr):
                raise _Return(value(fr))
            return run_return
        if isinstance(node, ExprStmt):
            value = self.expr(node.value)
            return lambda fr: value(fr) and None
        if isinstance(node, Pass):
            return lambda fr: None
        raise PpsRuntimeError(f"unsupported statement {type(node).__name__}")

    def store(self, target) -> Callable[[_Frame, object], None]:
        steps = []
        node = target
        while not isinstance(node, Name):
            if isinstance(node, Attribute):
                steps.append(("field", node.attr))
            else:
                steps.append(("index", self.expr(node.index)))
            node = node.value
        root = node.id
        steps.reverse()
        if not steps:
            def store_name(fr, value):
                fr.vars[root] = value
            return store_name

        def store_path(fr, value):
            if root not in fr.vars:
                raise PpsRuntimeError(f"name '{root}' used before assignment")
            keys = [s[1] if s[0] == "field" else s[1](fr) for s in steps]
            fr.vars[root] = _update(fr.vars[root], steps, keys, 0, value)
        return store_path

    # -- expressions --------------------------------------------------------

    def expr(self, node) -> Callable[[_Frame], object]:
        if isinstance(node, (Num, BoolLit, Str)):
            v = node.value
            return lambda fr: v
        if isinstance(node, Name):
            return self.name(node.id)
        if isinstance(node, Attribute):
            if isinstance(node.value, Name) and node.value.id not in self.locals:
                owner = node.value.id
                if owner in self.schema.enums:
                    enum = self.schema.enums[owner]
                    if node.attr not in enum.variants:
                        raise PpsRuntimeError(f"unknown variant {owner}.{node.attr}")
                    constant = EnumValue(owner, enum.variants.index(node.attr))
                    return lambda fr: constant
                if owner == "Action":
                    index = self.schema.actions.index(node.attr)
                    return lambda fr: index
            base = self.expr(node.value)
            attr = node.attr
            return lambda fr: _attribute(base(fr), attr)
        if isinstance(node, Subscript):
            base = self.expr(node.value)
            index = self.expr(node.index)
            return lambda fr: _index(base(fr), index(fr))
        if isinstance(node, BinOp):
            left, right = self.expr(node.left), self.expr(node.right)
            op = BIN_FUNCS[node.op]
            return lambda fr: op(left(fr), right(fr))
        if isinstance(node, UnaryOp):
            operand = self.expr(node.operand)
            if node.op == "not":
                return lambda fr: not operand(fr)
            if node.op == "-":
                return lambda fr: -operand(fr)
            return lambda fr: +operand(fr)
        if isinstance(node, BoolOp):
            values = [self.expr(v) for v in node.values]
            if node.op == "and":
                def run_and(fr):
                    result = True
                    for v in values:
                        result = v(fr)
                        if not result:
                            return result
                    return result
                return run_and

            def run_or(fr):
                result = False
                for v in values:
                    result = v(fr)
                    if result:
                        return result
                return result
            return run_or
        if isinstance(node, Compare):
            left = self.expr(node.left)
            pairs = [(CMP_FUNCS[op], self.expr(c)) for op, c in zip(node.ops, node.comparators)]

            def run_compare(fr):
                a = left(fr)
                for op, comparator in pairs:
                    b = comparator(fr)
                    if not op(a, b):
                        return False
                    a = b
                return True
            return run_compare
        if isinstance(node, IfExp):
            test, body, orelse = self.expr(node.test), self.expr(node.body), self.expr(node.orelse)
            return lambda fr: body(fr) if test(fr) else orelse(fr)
        if isinstance(node, (ListExpr, TupleExpr)):
            elts = [self.expr(e) for e in node.elts]
            return lambda fr: tuple(e(fr) for e in elts)
        if isinstance(node, Call):
            return self.call(node)
        raise PpsRuntimeError(f"unsupported expression {type(node).__name__}")

    def name(self, name: str):
        if name in self.locals:
            def load(fr):
                try:
                    return fr.vars[name]
                except KeyError:
                    raise PpsRuntimeError(f"name '{name}' used before assignment") from None
            return load
        if name == "NO_ACTION":
            return lambda fr: -1
        raise PpsRuntimeError(f"'{name}' cannot be used as a value")

    def call(self, node: Call):
        func = node.func
        args = [self.expr(a) for a in node.args]
        if func == "sample":
            site = node.args[0].value
            dist = args[1]
            return lambda fr: fr.chooser(site, dist(fr))
        if func == "Bernoulli":
            return lambda fr: _make_bernoulli(args[0](fr))
        if func == "Categorical":
            return lambda fr: _make_categorical(args[0](fr))
        if func == "UniformInt":
            return lambda fr: _make_uniform(args[0](fr), args[1](fr))
        if func == "Grid":
            return lambda fr: _make_grid(args[0](fr), args[1](fr), args[2](fr))
        if func in self.schema.records:
            record = self.schema.records[func]
            names = list(record.field_names[: len(args)])
            keywords = {k: self.expr(v) for k, v in node.keywords}
            order = record.field_names

            def construct(fr):
                given = dict(zip(names, (a(fr) for a in args)))
                for k, v in keywords.items():
                    given[k] = v(fr)
                return RecordValue(func, tuple((n, given[n]) for n in order))
            return construct
        builtin = {
            "abs": abs, "min": min, "max": max, "int": _to_int, "float": float, "bool": bool, "len": len,
        }.get(func)
        if builtin is None:
            raise PpsRuntimeError(f"call to unknown function '{func}'")
        if func in ("min", "max"):
            return lambda fr: builtin(*(a(fr) for a in args))
        if len(args) != 1:
            raise PpsRuntimeError(f"{func} takes exactly one argument")
        arg = args[0]
        return lambda fr: builtin(arg(fr))


def _make_grid(width, height, fill) -> GridValue:
    if type(width) is not int or type(height) is not int or width <= 0 or height <= 0:
        raise PpsRuntimeError(f"Grid dimensions must be positive ints, got ({width!r}, {height!r})")
    if width * height > MAX_GRID_CELLS:
        raise PpsRuntimeError("Grid too large")
    if not isinstance(fill, EnumValue):
        raise PpsRuntimeError("Grid fill must be an enum variant")
    return GridValue.filled(fill.enum, width, height, fill.index)


def _update(container, steps, keys, i: int, value):
    """Copy-on-write update of a nested value along a field/index path."""
    kind = steps[i][0]
    last = i == len(steps) - 1
    if kind == "field":
        if not isinstance(container, RecordValue) or not container.has(keys[i]):
            raise PpsRuntimeError(f"cannot assign field '{keys[i]}' on {type(container).__name__}")
        new = value if last else _update(container[keys[i]], steps, keys, i + 1, value)
        return container.replace(keys[i], new)
    if isinstance(container, GridValue):
        if i + 2 != len(steps) or steps[i + 1][0] != "index":
            raise PpsRuntimeError("grid cells must be assigned as grid[row][col]")
        row, col = keys[i], keys[i + 1]
        if type(row) is not int or type(col) is not int or not container.in_bounds(row, col):
            raise PpsRuntimeError(f"grid index [{row}][{col}] out of bounds")
        if not isinstance(value, EnumValue) or value.enum != container.enum:
            raise PpsRuntimeError(f"grid cells hold {container.enum} values, got {value!r}")
        return container.set(row, col, value)
    if isinstance(container, tuple):
        idx = keys[i]
        if type(idx) is not int or not 0 <= idx < len(container):
            raise PpsRuntimeError(f"list index {idx!r} out of range")
        new = value if last else _update(container[idx], steps, keys, i + 1, value)
        return container[:idx] + (new,) + container[idx + 1:]
    raise PpsRuntimeError(f"cannot assign into {type(container).__name__}")


def _compiled(program: Program):
    body = program.cache.get("compiled")
    if body is None:
        body = _Compiler(program).block(program.body)
        program.cache["compiled"] = body
    return body


_CAUGHT = (TypeError, ValueError, ZeroDivisionError, OverflowError, IndexError, KeyError,
           AttributeError, RecursionError)


def _execute(program: Program, inputs: Sequence[Value], chooser) -> Value:
    if len(inputs) != len(program.params):
        raise PpsRuntimeError(f"{program.name} expects {len(program.params)} inputs, got {len(inputs)}")
    frame = _Frame(dict(zip(program.params, inputs)), chooser, program.step_bound)
    try:
        _compiled(program)(frame)
    except _Return as r:
        return _coerce_output(program, r.value)
    except PpsRuntimeError:
        raise
    except _CAUGHT as e:
        raise PpsRuntimeError(f"{type(e).__name__}: {e}", cause=e) from e
    raise PpsRuntimeError(f"{program.name} finished without returning a value")


def _coerce_output(program: Program, out) -> Value:
    schema = program.schema
    if program.component == "reward":
        if not isinstance(out, tuple) or len(out) != 2:
            raise PpsRuntimeError("reward_func must return (reward, done)")
        reward, done = out
        if type(reward) is bool or not _number(reward):
            raise PpsRuntimeError(f"reward must be a finite number, got {reward!r}")
        if type(done) is int and done in (0, 1):
            done = bool(done)
        if type(done) is not bool:
            raise PpsRuntimeError(f"done must be a bool, got {done!r}")
        return reward_value(reward, done)
    expected = schema.observation if program.component == "observation" else schema.state
    if not validate(out, expected):
        raise PpsRuntimeError(f"output does not conform to {expected.name}: {out!r}")
    return out


def run(program: Program, inputs: Sequence[Value], seed: int) -> Value:
    """Draw one output; the same seed always gives the same output."""
    rng = np.random.default_rng(seed)
    return _execute(program, inputs, lambda site, dist: dist.sample(rng))


# ---------------------------------------------------------------------------
# Exact enumeration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TooManySites:
    reason: str


class _SiteLimit(Exception):
    pass


class _PathChooser:
    """Replays a fixed prefix of choices, then takes first branches and queues the siblings."""

    def __init__(self, prefix: tuple, pending: list, max_sites: int):
        self.choices = list(prefix)
        self.position = 0
        self.pending = pending
        self.max_sites = max_sites

    def __call__(self, site: str, dist):
        if self.position < len(self.choices):
            value = self.choices[self.position][0]
            self.position += 1
            return value
        if self.position >= self.max_sites:
            raise _SiteLimit()
        support = dist.support()
        base = tuple(self.choices)
        for sibling in reversed(support[1:]):
            self.pending.append(base + (sibling,))
        self.choices.append(support[0])
        self.position += 1
        return support[0][0]


@dataclass
class SupportTable:
    """Exact finite output distribution of one program on one input."""

    outcomes: tuple[Value, ...]
    probabilities: tuple[float, ...]
    errors: tuple[str, ...] = ()
    error_mass: float = 0.0
    _index: dict = field(default_factory=dict, repr=False)
    _cumulative: list = field(default_factory=list, repr=False)

    def __post_init__(self):
        self._index = {canonical_encode(v): i for i, v in enumerate(self.outcomes)}
        total = 0.0
        self._cumulative = []
        for p in self.probabilities:
            total += p
            self._cumulative.append(total)

    def __len__(self) -> int:
        return len(self.outcomes)

    def probability(self, value: Value) -> float:
        i = self._index.get(canonical_encode(value))
        return 0.0 if i is None else self.probabilities[i]

    def contains(self, value: Value) -> bool:
        return canonical_encode(value) in self._index

    def items(self) -> list[tuple[Value, float]]:
        return list(zip(self.outcomes, self.probabilities))

    def sample(self, rng: np.random.Generator) -> Value:
        u = rng.random()
        i = bisect.bisect_right(self._cumulative, u)
        if i >= len(self.outcomes):
            if self.error_mass > 0 or not self.outcomes:
                raise PpsRuntimeError(self.errors[0] if self.errors else "program has no valid outputs")
            i = len(self.outcomes) - 1
        return self.outcomes[i]


def enumerate_support(
    program: Program,
    inputs: Sequence[Value],
    max_sites: int = DEFAULT_MAX_SITES,
    max_paths: int = DEFAULT_MAX_PATHS,
) -> SupportTable | TooManySites:
    """Exact output distribution by walking every sample-site path.

    Paths that raise contribute no support; their mass is reported as
    error_mass and the rest is left unnormalized.
    """
    pending: list[tuple] = [()]
    mass: dict[bytes, float] = {}
    values: dict[bytes, Value] = {}
    errors: list[str] = []
    error_mass = 0.0
    paths = 0
    while pending:
        prefix = pending.pop()
        chooser = _PathChooser(prefix, pending, max_sites)
        try:
            out = _execute(program, inputs, chooser)
        except _SiteLimit:
            return TooManySites(f"more than {max_sites} sample sites on one path")
        except PpsRuntimeError as e:
            out = None
            if e.message not in errors:
                errors.append(e.message)
        paths += 1
        if paths > max_paths:
            return TooManySites(f"more than {max_paths} execution paths")
        probability = math.prod(p for _, p in chooser.choices)
        if out is None:
            error_mass += probability
            continue
        key = canonical_encode(out)
        if key not in mass:
            values[key] = out
            mass[key] = 0.0
        mass[key] += probability
    keys = list(mass)
    return SupportTable(
        outcomes=tuple(values[k] for k in keys),
        probabilities=tuple(mass[k] for k in keys),
        errors=tuple(errors),
        error_mass=error_mass,
    )


class ProgramSampler:
    """Caches support tables per input; falls back to seeded runs when a program is not enumerable."""

    def __init__(self, program: Program, max_sites: int = DEFAULT_MAX_SITES, cache_size: int = 200_000):
        self.program = program
        self.max_sites = max_sites
        self.cache_size = cache_size
        self._tables: dict[tuple, SupportTable | None] = {}

    def support(self, inputs: Sequence[Value]) -> SupportTable | None:
        key = tuple(inputs)
        if key in self._tables:
            return self._tables[key]
        result = enumerate_support(self.program, key, self.max_sites)
        table = result if isinstance(result, SupportTable) else None
        if len(self._tables) >= self.cache_size:
            self._tables.clear()
        self._tables[key] = table
        return table

    def sample(self, inputs: Sequence[Value], rng: np.random.Generator) -> Value:
        table = self.support(inputs)
        if table is not None:
            return table.sample(rng)
        return run(self.program, tuple(inputs), int(rng.integers(2 ** 63)))

    def probability(self, inputs: Sequence[Value], outcome: Value) -> float | None:
        """Exact probability, or None when the program could not be enumerated."""
        table = self.support(inputs)
        return None if table is None else table.probability(outcome)


def sampler_for(program: Program, max_sites: int = DEFAULT_MAX_SITES) -> ProgramSampler:
    """Shared sampler per program so its support cache is reused across callers."""
    key = ("sampler", max_sites)
    sampler = program.cache.get(key)
    if sampler is None:
        sampler = ProgramSampler(program, max_sites)
        program.cache[key] = sampler
    return sampler
