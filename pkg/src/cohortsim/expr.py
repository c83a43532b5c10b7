"""Expression language used in model files.

Expressions are small infix formulas (``p_base * (1 - effect)``,
``ifelse(state_time == 1, cost_surg, 0)``) evaluated element-wise over the
cycles of a model run.  Every value is a float64 vector of length ``T``.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional, Sequence, Union

import numpy as np

RESERVED = frozenset({"model_time", "markov_cycle", "state_time"})


class ExprError(Exception):
    """Base class for expression errors."""


class ExprSyntaxError(ExprError):
    def __init__(self, text: str, offset: int, expected: str):
        self.text = text
        self.offset = offset
        self.expected = expected
        super().__init__(f"syntax error at offset {offset}: expected {expected} in {text!r}")


class EvalError(ExprError):
    pass


# --------------------------------------------------------------------------
# Tree


@dataclass(frozen=True)
class Number:
    value: float


@dataclass(frozen=True)
class Name:
    name: str


@dataclass(frozen=True)
class BinOp:
    op: str
    left: "Expr"
    right: "Expr"


@dataclass(frozen=True)
class Unary:
    op: str  # "-" or "!"
    operand: "Expr"


@dataclass(frozen=True)
class Call:
    func: str
    args: tuple = ()
    kwargs: tuple = ()  # ((name, Expr), ...) in source order

    def kwarg(self, name: str) -> Optional["Expr"]:
        for k, v in self.kwargs:
            if k == name:
                return v
        return None


Expr = Union[Number, Name, BinOp, Unary, Call]

# lowest to highest; unary binds tighter than power
_BINARY_LEVELS = [
    ("||",),
    ("&&",),
    ("==", "!=", "<", "<=", ">", ">="),
    ("+", "-"),
    ("*", "/"),
    ("^",),
]
_PREC = {op: i for i, ops in enumerate(_BINARY_LEVELS) for op in ops}
_UNARY_PREC = len(_BINARY_LEVELS)

# --------------------------------------------------------------------------
# Lexer

_TOKEN_RE = re.compile(
    r"""
    (?P<ws>\s+)
  | (?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)
  | (?P<name>[A-Za-z_][A-Za-z0-9_.]*)
  | (?P<op>==|!=|<=|>=|&&|\|\||[-+*/^<>!(),=])
    """,
    re.VERBOSE,
)


@dataclass(frozen=True)
class _Tok:
    kind: str  # num, name, op, end
    text: str
    pos: int


def _tokenize(text: str) -> list[_Tok]:
    toks = []
    pos = 0
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if m is None:
            raise ExprSyntaxError(text, pos, "a number, name or operator")
        if m.lastgroup != "ws":
            toks.append(_Tok(m.lastgroup, m.group(), pos))
        pos = m.end()
    toks.append(_Tok("end", "", len(text)))
    return toks


class _Parser:
    def __init__(self, text: str):
        self.text = text
        self.toks = _tokenize(text)
        self.i = 0

    @property
    def tok(self) -> _Tok:
        return self.toks[self.i]

    def fail(self, expected: str):
        raise ExprSyntaxError(self.text, self.tok.pos, expected)

    def expect(self, text: str) -> None:
        if self.tok.kind != "op" or self.tok.text != text:
            self.fail(repr(text))
        self.i += 1

    def parse(self) -> Expr:
        node = self.binary(0)
        if self.tok.kind != "end":
            self.fail("an operator or end of input")
        return node

    def binary(self, level: int) -> Expr:
        if level == len(_BINARY_LEVELS):
            return self.unary()
        if _BINARY_LEVELS[level] == ("^",):
            left = self.unary()
            if self.tok.kind == "op" and self.tok.text == "^":
                self.i += 1
                return BinOp("^", left, self.binary(level))  # right-assoc
            return left
        left = self.binary(level + 1)
        while self.tok.kind == "op" and self.tok.text in _BINARY_LEVELS[level]:
            op = self.tok.text
            self.i += 1
            left = BinOp(op, left, self.binary(level + 1))
        return left

    def unary(self) -> Expr:
        if self.tok.kind == "op" and self.tok.text in ("-", "+", "!"):
            op = self.tok.text
            self.i += 1
            operand = self.unary()
            return operand if op == "+" else Unary(op, operand)
        return self.primary()

    def primary(self) -> Expr:
        tok = self.tok
        if tok.kind == "num":
            self.i += 1
            return Number(float(tok.text))
        if tok.kind == "name":
            self.i += 1
            if self.tok.kind == "op" and self.tok.text == "(":
                self.i += 1
                return self.call_rest(tok.text)
            return Name(tok.text)
        if tok.kind == "op" and tok.text == "(":
            self.i += 1
            node = self.binary(0)
            self.expect(")")
            return node
        self.fail("a number, name or '('")

    def call_rest(self, func: str) -> Call:
        args, kwargs = [], []
        if self.tok.kind == "op" and self.tok.text == ")":
            self.i += 1
            return Call(func)
        while True:
            nxt = self.toks[self.i + 1]
            if self.tok.kind == "name" and nxt.kind == "op" and nxt.text == "=":
                key = self.tok.text
                if any(k == key for k, _ in kwargs):
                    self.fail(f"a new argument name (duplicate {key!r})")
                self.i += 2
                kwargs.append((key, self.binary(0)))
            else:
                if kwargs:
                    self.fail("a named argument (positional after named)")
                args.append(self.binary(0))
            if self.tok.kind == "op" and self.tok.text == ",":
                self.i += 1
                continue
            self.expect(")")
            return Call(func, tuple(args), tuple(kwargs))


def parse_expression(text: str) -> Expr:
    if not isinstance(text, str) or not text.strip():
        raise ExprSyntaxError(str(text), 0, "a non-empty expression")
    return _Parser(text).parse()


def to_source(expr: Expr) -> str:
    """Render ``expr`` back to text that parses to the same tree."""
    return _render(expr, 0)


def _fmt_number(v: float) -> str:
    if v == int(v) and abs(v) < 1e15:
        return str(int(v))
    return repr(v)


def _render(e: Expr, parent: int) -> str:
    if isinstance(e, Number):
        return _fmt_number(e.value)
    if isinstance(e, Name):
        return e.name
    if isinstance(e, Unary):
        inner = _render(e.operand, _UNARY_PREC)
        return f"{e.op}{inner}"
    if isinstance(e, Call):
        parts = [_render(a, 0) for a in e.args]
        parts += [f"{k} = {_render(v, 0)}" for k, v in e.kwargs]
        return f"{e.func}({', '.join(parts)})"
    if isinstance(e, BinOp):
        p = _PREC[e.op]
        if e.op == "^":
            s = f"{_render(e.left, p + 1)} ^ {_render(e.right, p)}"
        else:
            s = f"{_render(e.left, p)} {e.op} {_render(e.right, p + 1)}"
        return f"({s})" if p < parent else s
    raise TypeError(f"not an expression node: {e!r}")


def identifiers(expr: Expr) -> set[str]:
    """Names referenced by ``expr`` (function names excluded)."""
    out: set[str] = set()
    stack = [expr]
    while stack:
        e = stack.pop()
        if isinstance(e, Name):
            out.add(e.name)
        elif isinstance(e, BinOp):
            stack += [e.left, e.right]
        elif isinstance(e, Unary):
            stack.append(e.operand)
        elif isinstance(e, Call):
            stack += list(e.args) + [v for _, v in e.kwargs]
    return out


def calls(expr: Expr) -> list[Call]:
    out = []
    stack = [expr]
    while stack:
        e = stack.pop()
        if isinstance(e, Call):
            out.append(e)
            stack += list(e.args) + [v for _, v in e.kwargs]
        elif isinstance(e, BinOp):
            stack += [e.left, e.right]
        elif isinstance(e, Unary):
            stack.append(e.operand)
    return out


# --------------------------------------------------------------------------
# Evaluation

# An extension receives the unevaluated call and the context.
Extension = Callable[[Call, "EvalContext"], np.ndarray]


@dataclass(frozen=True)
class EvalContext:
    cycles: int
    strategy: str = ""
    bindings: Mapping[str, np.ndarray] = field(default_factory=dict)
    state_time: Optional[np.ndarray] = None
    first_cycle_undiscounted: bool = True
    extensions: Mapping[str, Extension] = field(default_factory=dict)

    def __post_init__(self):
        if int(self.cycles) != self.cycles or self.cycles < 1:
            raise EvalError(f"cycle count must be a positive integer, got {self.cycles}")
        shadowed = RESERVED.intersection(self.bindings)
        if shadowed:
            raise EvalError(f"reserved names cannot be bound: {sorted(shadowed)}")
        for name, col in self.bindings.items():
            if np.shape(col) != (self.cycles,):
                raise EvalError(f"binding {name!r} has shape {np.shape(col)}, expected ({self.cycles},)")
        if self.state_time is not None and np.shape(self.state_time) != (self.cycles,):
            raise EvalError("state_time vector must have one entry per cycle")

    def model_time(self) -> np.ndarray:
        return np.arange(1, self.cycles + 1, dtype=float)

    def with_bindings(self, bindings: Mapping[str, np.ndarray]) -> "EvalContext":
        return EvalContext(self.cycles, self.strategy, bindings, self.state_time,
                           self.first_cycle_undiscounted, self.extensions)


def _check_prob(name: str, p: np.ndarray) -> None:
    if np.any((p < 0) | (p > 1)) or np.any(np.isnan(p)):
        raise EvalError(f"{name}: probabilities must lie in [0, 1], got {np.asarray(p).tolist()}")


def combine_probs(*probs) -> np.ndarray:
    """Probability of at least one of several independent events."""
    if not probs:
        raise EvalError("combine_probs needs at least one probability")
    out = np.ones_like(np.asarray(probs[0], dtype=float))
    for p in probs:
        p = np.asarray(p, dtype=float)
        _check_prob("combine_probs", p)
        out = out * (1.0 - p)
    return 1.0 - out


def discount(x, r, first_cycle_undiscounted: bool = True) -> np.ndarray:
    """Discount a per-cycle value sequence at rate ``r`` per cycle.

    With ``first_cycle_undiscounted`` cycle ``t`` is divided by
    ``(1 + r) ** (t - 1)``, otherwise by ``(1 + r) ** t``.
    """
    x = np.asarray(x, dtype=float)
    r = np.broadcast_to(np.asarray(r, dtype=float), x.shape)
    if np.any(r < 0):
        raise EvalError("discount rate must be non-negative")
    t = np.arange(1, x.shape[-1] + 1, dtype=float) if x.ndim else np.array(1.0)
    power = t - 1 if first_cycle_undiscounted else t
    return x / (1.0 + r) ** power


def rate_to_prob(r, per=1.0) -> np.ndarray:
    r, per = np.asarray(r, dtype=float), np.asarray(per, dtype=float)
    if np.any(r < 0) or np.any(per <= 0):
        raise EvalError("rate_to_prob: rate must be >= 0 and period > 0")
    return 1.0 - np.exp(-r * per)


def or_to_prob(or_, p) -> np.ndarray:
    or_, p = np.asarray(or_, dtype=float), np.asarray(p, dtype=float)
    _check_prob("or_to_prob", p)
    if np.any(p >= 1):
        raise EvalError("or_to_prob: baseline probability must be < 1")
    if np.any(or_ <= 0):
        raise EvalError("or_to_prob: odds ratio must be positive")
    q = or_ * p / (1.0 - p)
    return q / (1.0 + q)


def rr_to_prob(rr, p) -> np.ndarray:
    rr, p = np.asarray(rr, dtype=float), np.asarray(p, dtype=float)
    _check_prob("rr_to_prob", p)
    if np.any(rr <= 0):
        raise EvalError("rr_to_prob: relative risk must be positive")
    out = rr * p
    if np.any(out > 1):
        raise EvalError(f"rr_to_prob: rr * p exceeds 1 ({out.max()})")
    return out


def rescale_prob(p, from_=1.0, to=1.0) -> np.ndarray:
    p = np.asarray(p, dtype=float)
    _check_prob("rescale_prob", p)
    from_, to = np.asarray(from_, dtype=float), np.asarray(to, dtype=float)
    if np.any(from_ <= 0) or np.any(to <= 0):
        raise EvalError("rescale_prob: durations must be positive")
    with np.errstate(divide="ignore"):
        return -np.expm1(np.log1p(-p) * (to / from_))


def rescale_discount_rate(r, from_=1.0, to=1.0) -> np.ndarray:
    r = np.asarray(r, dtype=float)
    from_, to = np.asarray(from_, dtype=float), np.asarray(to, dtype=float)
    if np.any(from_ <= 0) or np.any(to <= 0):
        raise EvalError("rescale_discount_rate: durations must be positive")
    return np.expm1(np.log1p(r) * (to / from_))


@dataclass(frozen=True)
class _Builtin:
    fn: Callable
    params: tuple  # ordered parameter names as written in model files
    defaults: Mapping[str, float] = field(default_factory=dict)
    variadic: bool = False


def _discount_builtin(ctx: EvalContext):
    def fn(x, r, first=None):
        flag = ctx.first_cycle_undiscounted if first is None else bool(np.all(first != 0))
        return discount(x, r, flag)
    return fn


_BUILTINS: dict[str, _Builtin] = {
    "combine_probs": _Builtin(combine_probs, (), variadic=True),
    "rate_to_prob": _Builtin(rate_to_prob, ("r", "per"), {"per": 1.0}),
    "or_to_prob": _Builtin(or_to_prob, ("or", "p"), {}),
    "rr_to_prob": _Builtin(rr_to_prob, ("rr", "p"), {}),
    "rescale_prob": _Builtin(rescale_prob, ("p", "from", "to"), {"from": 1.0, "to": 1.0}),
    "rescale_discount_rate": _Builtin(rescale_discount_rate, ("r", "from", "to"), {"from": 1.0, "to": 1.0}),
    "exp": _Builtin(np.exp, ("x",)),
    "log": _Builtin(lambda x: _checked_log(x), ("x",)),
    "sqrt": _Builtin(lambda x: _checked_sqrt(x), ("x",)),
    "abs": _Builtin(np.abs, ("x",)),
    "floor": _Builtin(np.floor, ("x",)),
    "ceiling": _Builtin(np.ceil, ("x",)),
    "round": _Builtin(lambda x, digits=0.0: np.round(x, int(np.max(digits))), ("x", "digits"), {"digits": 0.0}),
    "min": _Builtin(lambda *xs: np.minimum.reduce(np.broadcast_arrays(*xs)), (), variadic=True),
    "max": _Builtin(lambda *xs: np.maximum.reduce(np.broadcast_arrays(*xs)), (), variadic=True),
}
# discount needs the context for its default convention
_CONTEXT_BUILTINS = {"discount": (("x", "r", "first"), {"first": None})}

BUILTIN_NAMES = frozenset(_BUILTINS) | frozenset(_CONTEXT_BUILTINS) | {"ifelse", "dispatch_strategy"}


def _checked_log(x):
    if np.any(x <= 0):
        raise EvalError("log of a non-positive value")
    return np.log(x)


def _checked_sqrt(x):
    if np.any(x < 0):
        raise EvalError("sqrt of a negative value")
    return np.sqrt(x)


def _bind(func: str, params: tuple, defaults: Mapping, args: list, kwargs: dict) -> list:
    if len(args) > len(params):
        raise EvalError(f"{func}() takes at most {len(params)} arguments, got {len(args)}")
    bound = dict(zip(params, args))
    for k, v in kwargs.items():
        if k not in params:
            raise EvalError(f"{func}() got an unexpected argument {k!r}")
        if k in bound:
            raise EvalError(f"{func}() got multiple values for argument {k!r}")
        bound[k] = v
    out = []
    for p in params:
        if p in bound:
            out.append(bound[p])
        elif p in defaults:
            out.append(defaults[p])
        else:
            raise EvalError(f"{func}() missing argument {p!r}")
    return out


def eval_expression(expr: Expr, ctx: EvalContext) -> np.ndarray:
    """Evaluate ``expr`` to a float vector with one entry per cycle."""
    out = _eval(expr, ctx)
    return np.broadcast_to(np.asarray(out, dtype=float), (ctx.cycles,)).copy()


def _eval(e: Expr, ctx: EvalContext):
    if isinstance(e, Number):
        return np.full(ctx.cycles, e.value)
    if isinstance(e, Name):
        return _lookup(e.name, ctx)
    if isinstance(e, BinOp):
        return _binop(e.op, _eval(e.left, ctx), _eval(e.right, ctx))
    if isinstance(e, Unary):
        v = _eval(e.operand, ctx)
        return -v if e.op == "-" else (v == 0).astype(float)
    if isinstance(e, Call):
        return _call(e, ctx)
    raise TypeError(f"not an expression node: {e!r}")


def _lookup(name: str, ctx: EvalContext) -> np.ndarray:
    if name in ("model_time", "markov_cycle"):
        return ctx.model_time()
    if name == "state_time":
        if ctx.state_time is None:
            raise EvalError("'state_time' used outside a state context")
        return np.asarray(ctx.state_time, dtype=float)
    try:
        return ctx.bindings[name]
    except KeyError:
        raise EvalError(f"unresolved identifier {name!r}") from None


def _binop(op: str, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if op == "+":
        return a + b
    if op == "-":
        return a - b
    if op == "*":
        return a * b
    if op == "/":
        if np.any(b == 0):
            raise EvalError("division by zero")
        return a / b
    if op == "^":
        with np.errstate(all="ignore"):
            out = np.power(a, b)
        if not np.all(np.isfinite(out)):
            raise EvalError("non-finite result in '^'")
        return out
    if op == "==":
        return (a == b).astype(float)
    if op == "!=":
        return (a != b).astype(float)
    if op == "<":
        return (a < b).astype(float)
    if op == "<=":
        return (a <= b).astype(float)
    if op == ">":
        return (a > b).astype(float)
    if op == ">=":
        return (a >= b).astype(float)
    if op == "&&":
        return ((a != 0) & (b != 0)).astype(float)
    if op == "||":
        return ((a != 0) | (b != 0)).astype(float)
    raise EvalError(f"unknown operator {op!r}")


def _call(e: Call, ctx: EvalContext) -> np.ndarray:
    if e.func in ctx.extensions:
        return np.asarray(ctx.extensions[e.func](e, ctx), dtype=float)
    if e.func == "dispatch_strategy":
        if e.args:
            raise EvalError("dispatch_strategy() takes named arguments only")
        branch = e.kwarg(ctx.strategy)
        if branch is None:
            raise EvalError(f"dispatch_strategy(): no branch for strategy {ctx.strategy!r}")
        return _eval(branch, ctx)
    if e.func == "ifelse":
        cond, yes, no = _bind("ifelse", ("cond", "yes", "no"), {}, list(e.args), dict(e.kwargs))
        # both branches are evaluated; selection is element-wise
        return np.where(_eval(cond, ctx) != 0, _eval(yes, ctx), _eval(no, ctx))
    args = [_eval(a, ctx) for a in e.args]
    kwargs = {k: _eval(v, ctx) for k, v in e.kwargs}
    if e.func in _CONTEXT_BUILTINS:
        params, defaults = _CONTEXT_BUILTINS[e.func]
        return _discount_builtin(ctx)(*_bind(e.func, params, defaults, args, kwargs))
    spec = _BUILTINS.get(e.func)
    if spec is None:
        raise EvalError(f"unknown function {e.func!r}")
    if spec.variadic:
        if kwargs:
            raise EvalError(f"{e.func}() takes positional arguments only")
        return spec.fn(*args)
    # overflow shows up as inf and is rejected by the callers
    with np.errstate(over="ignore"):
        return spec.fn(*_bind(e.func, spec.params, spec.defaults, args, kwargs))


def literal_value(expr: Expr) -> float:
    """Value of an expression built only from numbers and arithmetic."""
    if identifiers(expr) or calls(expr):
        raise EvalError(f"expected a constant, got {to_source(expr)!r}")
    return float(eval_expression(expr, EvalContext(1))[0])


def is_constant(expr: Expr, value: Optional[float] = None) -> bool:
    try:
        v = literal_value(expr)
    except ExprError:
        return False
    return value is None or math.isclose(v, value, rel_tol=0, abs_tol=0)


def evaluate_sequence(exprs: Sequence[tuple[str, Expr]], ctx: EvalContext) -> dict[str, np.ndarray]:
    """Evaluate named expressions in order, each seeing the previous ones."""
    bindings = dict(ctx.bindings)
    out = {}
    for name, e in exprs:
        local = ctx.with_bindings(bindings)
        try:
            out[name] = bindings[name] = eval_expression(e, local)
        except ExprError as err:
            raise EvalError(f"{name}: {err}") from err
    return out
