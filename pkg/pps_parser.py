"""
Probabilistic Program Parser
Parses the restricted Python subset model programs are written in, checks it
against a DomainSchema, and prints it back out.

A program is one function matching a component template. Parsing goes through
Python's own `ast` module and then converts into the frozen node types below,
rejecting anything outside the subset (while loops, recursion, imports, calls
to unknown functions, non-static loop bounds, ...).
"""

from __future__ import annotations

import ast
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Union

from pomdp_core import (
    BoolType,
    COMPONENTS,
    DomainSchema,
    EnumType,
    GridType,
    IntType,
    PomdpCoderError,
    RealType,
    RecordType,
)

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# Errors
# ---------------------------------------------------------------------------


class ProgramError(PomdpCoderError):
    """Any failure to turn text into a runnable program, or to run it."""

    def to_feedback(self) -> str:
        return f"{type(self).__name__}: {self.message}"


class PpsSyntaxError(ProgramError):
    def __init__(self, message: str, line: int = 0, col: int = 0):
        super().__init__(message, stage="parse", context={"line": line, "col": col})
        self.line = line
        self.col = col

    def to_feedback(self) -> str:
        return f"SyntaxError at line {self.line}, column {self.col}: {self.message}"


class RestrictionError(ProgramError):
    def __init__(self, construct: str, line: int | None = None):
        message = f"'{construct}' is not allowed in model programs"
        if line:
            message += f" (line {line})"
        super().__init__(message, stage="parse", context={"construct": construct})
        self.construct = construct
        self.line = line


class PpsTypeError(ProgramError):
    def __init__(self, message: str, field_name: str | None = None):
        super().__init__(message, stage="check", context={"field": field_name} if field_name else None)
        self.field_name = field_name


class PpsRuntimeError(ProgramError):
    def __init__(self, message: str, cause: Exception | None = None):
        super().__init__(message, stage="run", cause=cause)

    def to_feedback(self) -> str:
        return f"RuntimeError: {self.message}"


# ---------------------------------------------------------------------------
# Nodes
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Num:
    value: Union[int, float]


@dataclass(frozen=True)
class BoolLit:
    value: bool


@dataclass(frozen=True)
class Str:
    value: str


@dataclass(frozen=True)
class Name:
    id: str


@dataclass(frozen=True)
class Attribute:
    value: "Expr"
    attr: str


@dataclass(frozen=True)
class Subscript:
    value: "Expr"
    index: "Expr"


@dataclass(frozen=True)
class BinOp:
    op: str
    left: "Expr"
    right: "Expr"


@dataclass(frozen=True)
class UnaryOp:
    op: str
    operand: "Expr"


@dataclass(frozen=True)
class BoolOp:
    op: str
    values: tuple["Expr", ...]


@dataclass(frozen=True)
class Compare:
    left: "Expr"
    ops: tuple[str, ...]
    comparators: tuple["Expr", ...]


@dataclass(frozen=True)
class IfExp:
    test: "Expr"
    body: "Expr"
    orelse: "Expr"


@dataclass(frozen=True)
class Call:
    func: str
    args: tuple["Expr", ...] = ()
    keywords: tuple[tuple[str, "Expr"], ...] = ()


@dataclass(frozen=True)
class ListExpr:
    elts: tuple["Expr", ...]


@dataclass(frozen=True)
class TupleExpr:
    elts: tuple["Expr", ...]


Expr = Union[Num, BoolLit, Str, Name, Attribute, Subscript, BinOp, UnaryOp, BoolOp, Compare,
             IfExp, Call, ListExpr, TupleExpr]


@dataclass(frozen=True)
class Assign:
    target: Expr
    value: Expr


@dataclass(frozen=True)
class AugAssign:
    target: Expr
    op: str
    value: Expr


@dataclass(frozen=True)
class If:
    test: Expr
    body: tuple["Stmt", ...]
    orelse: tuple["Stmt", ...] = ()


@dataclass(frozen=True)
class For:
    var: str
    args: tuple[Expr, ...]
    body: tuple["Stmt", ...]


@dataclass(frozen=True)
class Return:
    value: Expr


@dataclass(frozen=True)
class Pass:
    pass


@dataclass(frozen=True)
class ExprStmt:
    value: Expr


Stmt = Union[Assign, AugAssign, If, For, Return, Pass, ExprStmt]


@dataclass(frozen=True)
class ComponentTemplate:
    component: str
    function: str
    params: tuple[str, ...]


TEMPLATES = {
    "initial": ComponentTemplate("initial", "initial_func", ("empty_state",)),
    "transition": ComponentTemplate("transition", "transition_func", ("state", "action")),
    "observation": ComponentTemplate("observation", "observation_func", ("state", "action", "empty_obs")),
    "reward": ComponentTemplate("reward", "reward_func", ("state", "action", "next_state")),
}


@dataclass(frozen=True)
class Program:
    component: str
    name: str
    params: tuple[str, ...]
    body: tuple[Stmt, ...]
    step_bound: int
    sites: tuple[str, ...]
    source: str = field(default="", compare=False, repr=False)
    schema: DomainSchema | None = field(default=None, compare=False, repr=False)
    cache: dict = field(default_factory=dict, compare=False, repr=False, hash=False)

    @property
    def text(self) -> str:
        return self.source or pretty_print(self)


BIN_OPS = {
    ast.Add: "+", ast.Sub: "-", ast.Mult: "*", ast.Div: "/",
    ast.FloorDiv: "//", ast.Mod: "%", ast.Pow: "**",
}
CMP_OPS = {
    ast.Eq: "==", ast.NotEq: "!=", ast.Lt: "<", ast.LtE: "<=", ast.Gt: ">", ast.GtE: ">=",
    ast.In: "in", ast.NotIn: "not in",
}
UNARY_OPS = {ast.USub: "-", ast.UAdd: "+", ast.Not: "not"}

DISTRIBUTIONS = {"Bernoulli": (1, BoolType()), "Categorical": (1, IntType(0, 2 ** 31)), "UniformInt": (2, IntType(-2 ** 31, 2 ** 31))}
BUILTINS = {"abs", "min", "max", "int", "float", "bool", "len"}

# Constructs rejected outright, keyed by Python AST node type
FORBIDDEN = {
    ast.While: "while loop",
    ast.Break: "break statement",
    ast.Continue: "continue statement",
    ast.Import: "import",
    ast.ImportFrom: "import",
    ast.FunctionDef: "nested function",
    ast.AsyncFunctionDef: "nested function",
    ast.ClassDef: "class definition",
    ast.Lambda: "lambda",
    ast.Try: "try statement",
    ast.With: "with statement",
    ast.Raise: "raise statement",
    ast.Assert: "assert statement",
    ast.Delete: "del statement",
    ast.Global: "global statement",
    ast.Nonlocal: "nonlocal statement",
    ast.ListComp: "comprehension",
    ast.SetComp: "comprehension",
    ast.DictComp: "comprehension",
    ast.GeneratorExp: "comprehension",
    ast.Dict: "dict literal",
    ast.Set: "set literal",
    ast.JoinedStr: "f-string",
    ast.NamedExpr: "assignment expression",
    ast.Yield: "yield",
    ast.YieldFrom: "yield",
    ast.Await: "await",
    ast.Starred: "starred expression",
    ast.Slice: "slice",
}


# ---------------------------------------------------------------------------
# Python AST -> program nodes
# ---------------------------------------------------------------------------


class _Converter:
    def __init__(self, function_name: str):
        self.function_name = function_name

    def forbid(self, node: ast.AST, construct: str | None = None):
        name = construct or FORBIDDEN.get(type(node), type(node).__name__)
        raise RestrictionError(name, getattr(node, "lineno", None))

    def block(self, stmts: list[ast.stmt]) -> tuple[Stmt, ...]:
        out = []
        for stmt in stmts:
            if isinstance(stmt, ast.Expr) and isinstance(stmt.value, ast.Constant) and isinstance(stmt.value.value, str):
                continue  # docstring
            out.append(self.stmt(stmt))
        if not out:
            out.append(Pass())
        return tuple(out)

    def stmt(self, node: ast.stmt) -> Stmt:
        if type(node) in FORBIDDEN:
            self.forbid(node)
        if isinstance(node, ast.Assign):
            if len(node.targets) != 1:
                self.forbid(node, "chained assignment")
            return Assign(self.target(node.targets[0]), self.expr(node.value))
        if isinstance(node, ast.AnnAssign):
            if node.value is None:
                self.forbid(node, "bare annotation")
            return Assign(self.target(node.target), self.expr(node.value))
        if isinstance(node, ast.AugAssign):
            op = BIN_OPS.get(type(node.op))
            if op is None:
                self.forbid(node, f"operator {type(node.op).__name__}")
            return AugAssign(self.target(node.target), op, self.expr(node.value))
        if isinstance(node, ast.If):
            return If(self.expr(node.test), self.block(node.body), self.block(node.orelse) if node.orelse else ())
        if isinstance(node, ast.For):
            if node.orelse:
                self.forbid(node, "for-else")
            if not isinstance(node.target, ast.Name):
                self.forbid(node, "for loop target other than a name")
            it = node.iter
            if not (isinstance(it, ast.Call) and isinstance(it.func, ast.Name) and it.func.id == "range"
                    and not it.keywords and 1 <= len(it.args) <= 3):
                self.forbid(node, "for loop over non-range iterable")
            return For(node.target.id, tuple(self.expr(a) for a in it.args), self.block(node.body))
        if isinstance(node, ast.Return):
            if node.value is None:
                self.forbid(node, "bare return")
            return Return(self.expr(node.value))
        if isinstance(node, ast.Pass):
            return Pass()
        if isinstance(node, ast.Expr):
            if not isinstance(node.value, ast.Call):
                self.forbid(node, "bare expression")
            return ExprStmt(self.expr(node.value))
        self.forbid(node)

    def target(self, node: ast.expr) -> Expr:
        if isinstance(node, ast.Name):
            return Name(node.id)
        if isinstance(node, ast.Attribute):
            return Attribute(self.target(node.value), node.attr)
        if isinstance(node, ast.Subscript):
            if isinstance(node.slice, ast.Slice):
                self.forbid(node.slice)
            return Subscript(self.target(node.value), self.expr(node.slice))
        if isinstance(node, (ast.Tuple, ast.List)):
            self.forbid(node, "tuple unpacking")
        self.forbid(node, "assignment target")

    def expr(self, node: ast.expr) -> Expr:
        if type(node) in FORBIDDEN:
            self.forbid(node)
        if isinstance(node, ast.Constant):
            v = node.value
            if isinstance(v, bool):
                return BoolLit(v)
            if isinstance(v, (int, float)):
                return Num(v)
            if isinstance(v, str):
                return Str(v)
            self.forbid(node, f"{type(v).__name__} literal")
        if isinstance(node, ast.Name):
            return Name(node.id)
        if isinstance(node, ast.Attribute):
            return Attribute(self.expr(node.value), node.attr)
        if isinstance(node, ast.Subscript):
            return Subscript(self.expr(node.value), self.expr(node.slice))
        if isinstance(node, ast.BinOp):
            op = BIN_OPS.get(type(node.op))
            if op is None:
                self.forbid(node, f"operator {type(node.op).__name__}")
            return BinOp(op, self.expr(node.left), self.expr(node.right))
        if isinstance(node, ast.UnaryOp):
            op = UNARY_OPS.get(type(node.op))
            if op is None:
                self.forbid(node, f"operator {type(node.op).__name__}")
            operand = node.operand
            if (op == "-" and isinstance(operand, ast.Constant)
                    and isinstance(operand.value, (int, float)) and not isinstance(operand.value, bool)):
                return Num(-operand.value)
            return UnaryOp(op, self.expr(operand))
        if isinstance(node, ast.BoolOp):
            return BoolOp("and" if isinstance(node.op, ast.And) else "or", tuple(self.expr(v) for v in node.values))
        if isinstance(node, ast.Compare):
            ops = []
            for op in node.ops:
                name = CMP_OPS.get(type(op))
                if name is None:
                    self.forbid(node, f"'{type(op).__name__}' comparison")
                ops.append(name)
            return Compare(self.expr(node.left), tuple(ops), tuple(self.expr(c) for c in node.comparators))
        if isinstance(node, ast.IfExp):
            return IfExp(self.expr(node.test), self.expr(node.body), self.expr(node.orelse))
        if isinstance(node, ast.Call):
            if not isinstance(node.func, ast.Name):
                self.forbid(node, f"method call '{ast.unparse(node.func)}'")
            if node.func.id == self.function_name:
                self.forbid(node, "recursion")
            keywords = []
            for kw in node.keywords:
                if kw.arg is None:
                    self.forbid(node, "keyword unpacking")
                keywords.append((kw.arg, self.expr(kw.value)))
            return Call(node.func.id, tuple(self.expr(a) for a in node.args), tuple(keywords))
        if isinstance(node, ast.List):
            return ListExpr(tuple(self.expr(e) for e in node.elts))
        if isinstance(node, ast.Tuple):
            return TupleExpr(tuple(self.expr(e) for e in node.elts))
        self.forbid(node)


# ---------------------------------------------------------------------------
# Static checking against the schema
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class _RowOf:
    grid: GridType


@dataclass(frozen=True)
class _EnumNamespace:
    enum: EnumType


class _ActionNamespace:
    pass


_ACTIONS = _ActionNamespace()
_INT = IntType(-2 ** 63, 2 ** 63 - 1)
_DIST = "distribution"


def _param_types(component: str, schema: DomainSchema) -> tuple:
    if component == "initial":
        return (schema.state,)
    if component == "transition":
        return (schema.state, _INT)
    if component == "observation":
        return (schema.state, _INT, schema.observation)
    return (schema.state, _INT, schema.state)


def assigned_names(stmts) -> dict[str, int]:
    counts: dict[str, int] = {}
    for stmt in stmts:
        if isinstance(stmt, (Assign, AugAssign)):
            root = stmt.target
            while not isinstance(root, Name):
                root = root.value
            counts[root.id] = counts.get(root.id, 0) + (1 if isinstance(stmt.target, Name) else 0)
        elif isinstance(stmt, If):
            for name, n in assigned_names(stmt.body + stmt.orelse).items():
                counts[name] = counts.get(name, 0) + n
        elif isinstance(stmt, For):
            counts[stmt.var] = counts.get(stmt.var, 0) + 2
            for name, n in assigned_names(stmt.body).items():
                counts[name] = counts.get(name, 0) + 2 * max(n, 1)
    return counts


class _Checker:
    def __init__(self, schema: DomainSchema, component: str, params: tuple[str, ...], body):
        self.schema = schema
        self.component = component
        self.sites: list[str] = []
        self.globals: dict[str, object] = {name: _EnumNamespace(e) for name, e in schema.enums.items()}
        self.globals["Action"] = _ACTIONS
        self.globals["NO_ACTION"] = _INT
        self.assign_counts = assigned_names(body)
        self.known = set(params) | set(self.assign_counts)
        self.env: dict[str, object] = dict(zip(params, _param_types(component, schema)))
        self.constants: dict[str, int] = {}

    # -- blocks -------------------------------------------------------------

    def block(self, stmts) -> int:
        return sum(self.stmt(s) for s in stmts)

    def stmt(self, stmt) -> int:
        if isinstance(stmt, Assign):
            value_type = self.infer(stmt.value)
            if isinstance(stmt.target, Name):
                name = stmt.target.id
                if name in self.env and self.env[name] != value_type:
                    self.env[name] = None
                else:
                    self.env[name] = value_type
                if self.assign_counts.get(name) == 1:
                    static = self.static_int(stmt.value)
                    if static is not None:
                        self.constants[name] = static
            else:
                self.check_target(stmt.target)
            return 1
        if isinstance(stmt, AugAssign):
            self.infer(stmt.value)
            self.check_target(stmt.target)
            return 1
        if isinstance(stmt, If):
            self.infer(stmt.test)
            return 1 + self.block(stmt.body) + self.block(stmt.orelse)
        if isinstance(stmt, For):
            bounds = [self.static_int(a) for a in stmt.args]
            if any(b is None for b in bounds):
                raise RestrictionError("non-static loop bound")
            if len(bounds) == 3 and bounds[2] == 0:
                raise RestrictionError("zero loop step")
            self.env[stmt.var] = _INT
            iterations = len(range(*bounds))
            return 1 + iterations * (1 + self.block(stmt.body))
        if isinstance(stmt, Return):
            self.check_return(stmt.value)
            return 1
        if isinstance(stmt, ExprStmt):
            self.infer(stmt.value)
            return 1
        return 1

    def check_return(self, value) -> None:
        if self.component == "reward":
            if not isinstance(value, TupleExpr) or len(value.elts) != 2:
                raise PpsTypeError("reward_func must return a (reward, done) tuple")
        elif isinstance(value, TupleExpr):
            raise PpsTypeError(f"{TEMPLATES[self.component].function} must return a single value")
        self.infer(value)

    def check_target(self, target) -> None:
        if isinstance(target, Name):
            if target.id not in self.env:
                raise PpsTypeError(f"assignment into undefined name '{target.id}'", target.id)
            return
        self.infer(target)

    # -- expressions --------------------------------------------------------

    def lookup(self, name: str):
        if name in self.env:
            return self.env[name]
        if name in self.known:
            return None
        if name in self.globals:
            return self.globals[name]
        if name in self.schema.records:
            raise PpsTypeError(f"'{name}' must be called to construct a record", name)
        raise PpsTypeError(f"unknown name '{name}'", name)

    def infer(self, node):
        if isinstance(node, Num):
            return _INT if isinstance(node.value, int) else RealType()
        if isinstance(node, BoolLit):
            return BoolType()
        if isinstance(node, Str):
            return None
        if isinstance(node, Name):
            return self.lookup(node.id)
        if isinstance(node, Attribute):
            base = self.infer(node.value)
            if isinstance(base, RecordType):
                t = base.field_type(node.attr)
                if t is None:
                    raise PpsTypeError(f"unknown field '{node.attr}' on {base.name}", node.attr)
                return t
            if isinstance(base, GridType):
                if node.attr not in ("width", "height"):
                    raise PpsTypeError(f"grids only expose width and height, not '{node.attr}'", node.attr)
                return _INT
            if isinstance(base, _EnumNamespace):
                if node.attr not in base.enum.variants:
                    raise PpsTypeError(f"unknown variant '{node.attr}' of {base.enum.name}", node.attr)
                return base.enum
            if base is _ACTIONS:
                if node.attr not in self.schema.actions:
                    raise PpsTypeError(f"unknown action '{node.attr}'", node.attr)
                return _INT
            if base is None:
                return None
            raise PpsTypeError(f"attribute '{node.attr}' on a non-record value", node.attr)
        if isinstance(node, Subscript):
            base = self.infer(node.value)
            self.infer(node.index)
            if isinstance(base, GridType):
                return _RowOf(base)
            if isinstance(base, _RowOf):
                return base.grid.cell
            return None
        if isinstance(node, BinOp):
            left, right = self.infer(node.left), self.infer(node.right)
            if node.op == "/" or isinstance(left, RealType) or isinstance(right, RealType):
                return RealType()
            return _INT if left == _INT and right == _INT else None
        if isinstance(node, UnaryOp):
            operand = self.infer(node.operand)
            return BoolType() if node.op == "not" else operand
        if isinstance(node, BoolOp):
            for v in node.values:
                self.infer(v)
            return None
        if isinstance(node, Compare):
            self.infer(node.left)
            for c in node.comparators:
                self.infer(c)
            return BoolType()
        if isinstance(node, IfExp):
            self.infer(node.test)
            body, orelse = self.infer(node.body), self.infer(node.orelse)
            return body if body == orelse else None
        if isinstance(node, (ListExpr, TupleExpr)):
            for e in node.elts:
                self.infer(e)
            return None
        if isinstance(node, Call):
            return self.infer_call(node)
        return None

    def infer_call(self, node: Call):
        func = node.func
        if func == "sample":
            if len(node.args) != 2 or node.keywords:
                raise PpsTypeError("sample takes exactly (name, distribution)")
            if not isinstance(node.args[0], Str):
                raise RestrictionError("non-literal sample site name")
            dist = node.args[1]
            if not isinstance(dist, Call) or dist.func not in DISTRIBUTIONS:
                raise PpsTypeError("sample needs a Bernoulli, Categorical or UniformInt distribution")
            self.infer(dist)
            self.sites.append(node.args[0].value)
            return DISTRIBUTIONS[dist.func][1] if dist.func == "Bernoulli" else _INT
        if func in DISTRIBUTIONS:
            arity = DISTRIBUTIONS[func][0]
            if len(node.args) != arity or node.keywords:
                raise PpsTypeError(f"{func} takes {arity} argument(s)")
            for a in node.args:
                self.infer(a)
            return _DIST
        if func == "Grid":
            if len(node.args) != 3 or node.keywords:
                raise PpsTypeError("Grid takes (width, height, fill)")
            width, height = self.static_int(node.args[0]), self.static_int(node.args[1])
            fill = self.infer(node.args[2])
            if width is not None and height is not None and isinstance(fill, EnumType):
                return GridType(fill, width, height)
            return None
        if func in self.schema.records:
            record = self.schema.records[func]
            if len(node.args) > len(record.fields):
                raise PpsTypeError(f"{func} takes at most {len(record.fields)} positional arguments")
            given = list(record.field_names[: len(node.args)])
            for name, value in node.keywords:
                if record.field_type(name) is None:
                    raise PpsTypeError(f"unknown field '{name}' on {func}", name)
                if name in given:
                    raise PpsTypeError(f"field '{name}' given twice", name)
                given.append(name)
                self.infer(value)
            for a in node.args:
                self.infer(a)
            missing = [n for n in record.field_names if n not in given]
            if missing:
                raise PpsTypeError(f"missing field '{missing[0]}' for {func}", missing[0])
            return record
        if func in BUILTINS:
            types = [self.infer(a) for a in node.args]
            if func in ("int", "len"):
                return _INT
            if func == "float":
                return RealType()
            if func == "bool":
                return BoolType()
            return types[0] if types and all(t == types[0] for t in types) else None
        if func == "range":
            raise RestrictionError("range outside a for loop")
        raise RestrictionError(f"call to '{func}'")

    def static_int(self, node) -> int | None:
        if isinstance(node, Num) and isinstance(node.value, int):
            return node.value
        if isinstance(node, Name):
            return self.constants.get(node.id)
        if isinstance(node, UnaryOp) and node.op in ("-", "+"):
            v = self.static_int(node.operand)
            return None if v is None else (-v if node.op == "-" else v)
        if isinstance(node, BinOp) and node.op in ("+", "-", "*", "//", "%"):
            left, right = self.static_int(node.left), self.static_int(node.right)
            if left is None or right is None:
                return None
            if node.op in ("//", "%") and right == 0:
                return None
            return {"+": lambda: left + right, "-": lambda: left - right, "*": lambda: left * right,
                    "//": lambda: left // right, "%": lambda: left % right}[node.op]()
        if isinstance(node, Call) and node.func in ("min", "max", "abs") and node.args:
            values = [self.static_int(a) for a in node.args]
            if any(v is None for v in values):
                return None
            return abs(values[0]) if node.func == "abs" else {"min": min, "max": max}[node.func](values)
        if isinstance(node, Attribute) and node.attr in ("width", "height"):
            try:
                base = self.infer(node.value)
            except PpsTypeError:
                return None
            if isinstance(base, GridType):
                return base.width if node.attr == "width" else base.height
        return None


# ---------------------------------------------------------------------------
# Public API
# ---------------------------------------------------------------------------


def parse(source: str, component: str, schema: DomainSchema) -> Program:
    """Parse and statically check a model program for one component."""
    if component not in TEMPLATES:
        raise ValueError(f"Unknown component '{component}'")
    template = TEMPLATES[component]
    try:
        module = ast.parse(source)
    except SyntaxError as e:
        raise PpsSyntaxError(e.msg or "invalid syntax", e.lineno or 0, e.offset or 0) from e
    except ValueError as e:
        raise PpsSyntaxError(str(e)) from e

    functions = []
    for node in module.body:
        if isinstance(node, ast.FunctionDef):
            functions.append(node)
        elif isinstance(node, ast.Expr) and isinstance(node.value, ast.Constant) and isinstance(node.value.value, str):
            continue
        elif isinstance(node, (ast.Import, ast.ImportFrom)):
            raise RestrictionError("import", node.lineno)
        else:
            raise RestrictionError("top-level statement", getattr(node, "lineno", None))
    if len(functions) != 1:
        raise PpsTypeError(f"expected exactly one function named '{template.function}', found {len(functions)}")
    fn = functions[0]
    if fn.name != template.function:
        raise PpsTypeError(f"expected a function named '{template.function}', found '{fn.name}'")
    if fn.decorator_list:
        raise RestrictionError("decorator", fn.lineno)
    args = fn.args
    if args.vararg or args.kwarg or args.kwonlyargs or args.posonlyargs or args.defaults:
        raise RestrictionError("variadic or default parameters", fn.lineno)
    params = tuple(a.arg for a in args.args)
    if len(params) != len(template.params):
        raise PpsTypeError(
            f"{template.function} must take {len(template.params)} parameter(s) "
            f"({', '.join(template.params)}), found {len(params)}"
        )

    body = _Converter(fn.name).block(fn.body)
    checker = _Checker(schema, component, params, body)
    step_bound = checker.block(body)
    return Program(
        component=component,
        name=fn.name,
        params=params,
        body=body,
        step_bound=step_bound,
        sites=tuple(checker.sites),
        source=source,
        schema=schema,
    )


def load_program(path: str | Path, schema: DomainSchema, component: str | None = None) -> Program:
    """Read a .pps file; the component defaults to the file stem."""
    path = Path(path)
    component = component or path.stem
    if component not in COMPONENTS:
        raise ValueError(f"Cannot infer component from '{path.name}'")
    return parse(path.read_text(encoding="utf-8"), component, schema)


def save_program(program: Program, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(program.text, encoding="utf-8")
    return path


# ---------------------------------------------------------------------------
# Pretty printing
# ---------------------------------------------------------------------------

_COMPOUND = (BinOp, UnaryOp, BoolOp, Compare, IfExp)


def _operand(node) -> str:
    text = _expr(node)
    if isinstance(node, _COMPOUND) or (isinstance(node, Num) and str(node.value).startswith("-")):
        return f"({text})"
    return text


def _base(node) -> str:
    text = _expr(node)
    if isinstance(node, _COMPOUND + (Num,)):
        return f"({text})"
    return text


def _expr(node) -> str:
    if isinstance(node, Num):
        return repr(node.value)
    if isinstance(node, BoolLit):
        return "True" if node.value else "False"
    if isinstance(node, Str):
        return repr(node.value)
    if isinstance(node, Name):
        return node.id
    if isinstance(node, Attribute):
        return f"{_base(node.value)}.{node.attr}"
    if isinstance(node, Subscript):
        return f"{_base(node.value)}[{_expr(node.index)}]"
    if isinstance(node, BinOp):
        return f"{_operand(node.left)} {node.op} {_operand(node.right)}"
    if isinstance(node, UnaryOp):
        sep = " " if node.op == "not" else ""
        return f"{node.op}{sep}{_operand(node.operand)}"
    if isinstance(node, BoolOp):
        return f" {node.op} ".join(_operand(v) for v in node.values)
    if isinstance(node, Compare):
        parts = [_operand(node.left)]
        for op, comparator in zip(node.ops, node.comparators):
            parts.append(op)
            parts.append(_operand(comparator))
        return " ".join(parts)
    if isinstance(node, IfExp):
        return f"{_operand(node.body)} if {_operand(node.test)} else {_operand(node.orelse)}"
    if isinstance(node, Call):
        args = [_expr(a) for a in node.args] + [f"{k}={_expr(v)}" for k, v in node.keywords]
        return f"{node.func}({', '.join(args)})"
    if isinstance(node, ListExpr):
        return "[" + ", ".join(_expr(e) for e in node.elts) + "]"
    if isinstance(node, TupleExpr):
        if len(node.elts) == 1:
            return f"({_expr(node.elts[0])},)"
        return "(" + ", ".join(_expr(e) for e in node.elts) + ")"
    raise TypeError(f"Unknown node {type(node).__name__}")


def _block(stmts, indent: int) -> list[str]:
    lines: list[str] = []
    pad = "    " * indent
    for stmt in stmts:
        if isinstance(stmt, Assign):
            lines.append(f"{pad}{_expr(stmt.target)} = {_expr(stmt.value)}")
        elif isinstance(stmt, AugAssign):
            lines.append(f"{pad}{_expr(stmt.target)} {stmt.op}= {_expr(stmt.value)}")
        elif isinstance(stmt, If):
            lines.extend(_if(stmt, indent, "if"))
        elif isinstance(stmt, For):
            args = ", ".join(_expr(a) for a in stmt.args)
            lines.append(f"{pad}for {stmt.var} in range({args}):")
            lines.extend(_block(stmt.body, indent + 1))
        elif isinstance(stmt, Return):
            lines.append(f"{pad}return {_expr(stmt.value)}")
        elif isinstance(stmt, Pass):
            lines.append(f"{pad}pass")
        elif isinstance(stmt, ExprStmt):
            lines.append(f"{pad}{_expr(stmt.value)}")
    return lines


def _if(stmt: If, indent: int, keyword: str) -> list[str]:
    pad = "    " * indent
    lines = [f"{pad}{keyword} {_expr(stmt.test)}:"]
    lines.extend(_block(stmt.body, indent + 1))
    if len(stmt.orelse) == 1 and isinstance(stmt.orelse[0], If):
        lines.extend(_if(stmt.orelse[0], indent, "elif"))
    elif stmt.orelse:
        lines.append(f"{pad}else:")
        lines.extend(_block(stmt.orelse, indent + 1))
    return lines


def pretty_print(program: Program) -> str:
    """Source text that parses back to an equal program."""
    lines = [f"def {program.name}({', '.join(program.params)}):"]
    lines.extend(_block(program.body, 1))
    return "\n".join(lines) + "\n"
