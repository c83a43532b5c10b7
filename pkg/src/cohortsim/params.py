"""Ordered parameter definitions and their per-cycle evaluation."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping, Optional, Union

import numpy as np
import pandas as pd

from . import survival as sv
from .expr import (
    RESERVED,
    BinOp,
    Unary,
    Call,
    EvalContext,
    EvalError,
    Expr,
    ExprError,
    Name,
    Number,
    eval_expression,
    identifiers,
    parse_expression,
)


class ParameterError(ValueError):
    pass


Definition = Union[str, float, int, Expr]


def _to_expr(d: Definition) -> Expr:
    if isinstance(d, (Number, Name, Call, BinOp, Unary)):
        return d
    if isinstance(d, bool):
        return Number(float(d))
    if isinstance(d, (int, float)):
        return Number(float(d))
    return parse_expression(str(d))


# --------------------------------------------------------------------------
# Survival declarations referenced from parameters via compute_surv()

_SCALAR_OPS = {"apply_hr": "hr", "apply_or": "or", "apply_af": "af"}
_LIST_OPS = {"join": "at", "pool": "weights", "add_hazards": None}


@dataclass(frozen=True)
class SurvivalDecl:
    """Symbolic survival distribution whose numeric arguments are expressions.

    ``kind`` is ``"parametric"``, ``"data"`` (Kaplan-Meier, optionally with a
    fitted parametric tail in ``family``/``args``) or one of the tree
    operators ``apply_hr``, ``apply_or``, ``apply_af``, ``join``, ``pool``,
    ``add_hazards``.
    """

    name: str
    kind: str
    family: Optional[str] = None
    args: tuple = ()  # ((key, (Expr, ...)), ...)
    of: tuple = ()
    km: Optional[sv.KaplanMeier] = field(default=None, compare=False)

    def exprs(self) -> list[tuple[str, Expr]]:
        return [(f"{k}[{i}]", e) for k, es in self.args for i, e in enumerate(es)]


def survival_identifiers(decls: Mapping[str, SurvivalDecl], name: str) -> set[str]:
    out: set[str] = set()
    seen = set()
    stack = [name]
    while stack:
        n = stack.pop()
        if n in seen:
            continue
        seen.add(n)
        d = decls[n]
        for _, e in d.exprs():
            out |= identifiers(e)
        stack += list(d.of)
    return out


def _build_dist(decls, name: str, values: Mapping[tuple, float]) -> sv.Distribution:
    d = decls[name]

    def val(key):
        return [values[(name, f"{key}[{i}]")] for i in range(len(dict(d.args)[key]))]

    if d.kind == "parametric":
        return sv.define_survival(d.family, **{k: val(k)[0] for k, _ in d.args})
    if d.kind == "data":
        if d.family is None:
            return d.km
        return sv.Fitted(sv.define_survival(d.family, **{k: val(k)[0] for k, _ in d.args}), d.km)
    children = [_build_dist(decls, c, values) for c in d.of]
    if d.kind in _SCALAR_OPS:
        fn = getattr(sv, d.kind)
        return fn(children[0], val(_SCALAR_OPS[d.kind])[0])
    if d.kind == "join":
        return sv.join(*children, at=val("at"))
    if d.kind == "pool":
        return sv.pool(*children, weights=val("weights"))
    if d.kind == "add_hazards":
        return sv.add_hazards(*children)
    raise ParameterError(f"unknown survival declaration kind {d.kind!r}")


def _decl_arrays(decls, name, ctx, out):
    d = decls[name]
    for key, e in d.exprs():
        out[(name, key)] = eval_expression(e, ctx)
    for c in d.of:
        _decl_arrays(decls, c, ctx, out)
    return out


def validate_survival(decls: Mapping[str, SurvivalDecl]) -> None:
    """Check kinds, children, declaration order and arities."""
    order = list(decls)
    for i, (name, d) in enumerate(decls.items()):
        if d.kind == "parametric" and d.family not in sv.FAMILIES:
            raise ParameterError(f"survival {name!r}: unknown distribution {d.family!r}")
        if d.kind == "data" and d.km is None:
            raise ParameterError(f"survival {name!r}: no survival data")
        if d.kind in _SCALAR_OPS or d.kind in _LIST_OPS:
            if not d.of:
                raise ParameterError(f"survival {name!r}: '{d.kind}' needs 'of'")
            for c in d.of:
                if c not in decls or order.index(c) >= i:
                    raise ParameterError(f"survival {name!r}: {c!r} must be declared before it")
            if d.kind in _SCALAR_OPS and len(d.of) != 1:
                raise ParameterError(f"survival {name!r}: '{d.kind}' takes exactly one distribution")
        elif d.kind not in ("parametric", "data"):
            raise ParameterError(f"survival {name!r}: unknown kind {d.kind!r}")
        if d.kind == "join" and len(dict(d.args).get("at", ())) != len(d.of) - 1:
            raise ParameterError(f"survival {name!r}: join needs {len(d.of) - 1} cut times")
        if d.kind == "pool" and len(dict(d.args).get("weights", ())) != len(d.of):
            raise ParameterError(f"survival {name!r}: pool needs one weight per distribution")


def compute_surv_extension(decls: Mapping[str, SurvivalDecl]):
    """``compute_surv(name, time = ..., cycle_length = 1, km_limit = 0)``."""

    def ext(call: Call, ctx: EvalContext) -> np.ndarray:
        if not call.args or not isinstance(call.args[0], Name) or call.args[0].name not in decls:
            raise EvalError("compute_surv() first argument must name a declared survival distribution")
        name = call.args[0].name
        rest = dict(zip(("time", "cycle_length", "km_limit"), call.args[1:]))
        for k, v in call.kwargs:
            if k not in ("time", "cycle_length", "km_limit") or k in rest:
                raise EvalError(f"compute_surv() bad argument {k!r}")
            rest[k] = v
        if "time" not in rest:
            raise EvalError("compute_surv() needs a time argument")
        time = eval_expression(rest["time"], ctx)
        cl = eval_expression(rest.get("cycle_length", Number(1.0)), ctx)
        kml = eval_expression(rest.get("km_limit", Number(0.0)), ctx)
        arrays = _decl_arrays(decls, name, ctx, {})
        keys = list(arrays)
        out = np.empty(ctx.cycles)
        groups: dict = {}  # cycles sharing one parameter tuple share a distribution
        for k in range(ctx.cycles):
            key = tuple(float(arrays[p][k]) for p in keys) + (float(cl[k]), float(kml[k]))
            groups.setdefault(key, []).append(k)
        for key, idx in groups.items():
            try:
                dist = _build_dist(decls, name, dict(zip(keys, key)))
                out[idx] = sv.compute_surv(dist, time[idx], key[-2], key[-1])
            except sv.SurvivalError as err:
                raise EvalError(f"compute_surv({name}): {err}") from err
        return out

    return ext


# --------------------------------------------------------------------------
# Parameter sets


@dataclass(frozen=True)
class Parameter:
    name: str
    expr: Expr


@dataclass(frozen=True)
class ParameterSet:
    params: tuple = ()
    survival: Mapping[str, SurvivalDecl] = field(default_factory=dict, compare=False)

    @property
    def names(self) -> list[str]:
        return [p.name for p in self.params]

    def __contains__(self, name: str) -> bool:
        return any(p.name == name for p in self.params)

    def __getitem__(self, name: str) -> Expr:
        for p in self.params:
            if p.name == name:
                return p.expr
        raise KeyError(name)

    def __len__(self):
        return len(self.params)

    def dependencies(self, name: str) -> set[str]:
        """Direct references of one parameter, survival arguments included."""
        e = self[name]
        deps = set(identifiers(e))
        for surv in deps & set(self.survival):
            deps |= survival_identifiers(self.survival, surv)
        return deps - set(self.survival)

    def depends_on(self, target: str) -> set[str]:
        """Parameters whose value depends (transitively) on ``target``."""
        hit: set[str] = set()
        for p in self.params:
            deps = self.dependencies(p.name)
            if target in deps or deps & hit:
                hit.add(p.name)
        return hit

    def with_values(self, values: Mapping[str, float]) -> "ParameterSet":
        """Replace definitions by constants, keeping positions."""
        unknown = set(values) - set(self.names)
        if unknown:
            raise ParameterError(f"unknown parameters: {sorted(unknown)}")
        params = tuple(
            Parameter(p.name, Number(float(values[p.name]))) if p.name in values else p for p in self.params
        )
        return ParameterSet(params, self.survival)


def _pairs(defs) -> list[tuple[str, Definition]]:
    if isinstance(defs, Mapping):
        return list(defs.items())
    return list(defs)


def _check_references(params: list[Parameter], survival: Mapping[str, SurvivalDecl]) -> None:
    known: set[str] = set()
    for p in params:
        if p.name in RESERVED:
            raise ParameterError(f"{p.name!r} is a reserved name")
        if p.name in survival:
            raise ParameterError(f"{p.name!r} is already a survival distribution name")
        refs = identifiers(p.expr)
        for s in refs & set(survival):
            refs |= survival_identifiers(survival, s)
        missing = refs - known - RESERVED - set(survival)
        if missing:
            raise ParameterError(f"parameter {p.name!r}: unresolved reference to {sorted(missing)}")
        known.add(p.name)


def build_parameter_set(defs, survival: Optional[Mapping[str, SurvivalDecl]] = None) -> ParameterSet:
    """Build from ``{name: definition}`` or ``[(name, definition), ...]``."""
    survival = dict(survival or {})
    pairs = _pairs(defs)
    names = [n for n, _ in pairs]
    dup = {n for n in names if names.count(n) > 1}
    if dup:
        raise ParameterError(f"duplicate parameter names: {sorted(dup)}")
    try:
        params = [Parameter(n, _to_expr(d)) for n, d in pairs]
    except ExprError as err:
        raise ParameterError(str(err)) from err
    _check_references(params, survival)
    return ParameterSet(tuple(params), survival)


def modify_parameter_set(ps: ParameterSet, defs) -> ParameterSet:
    """Replace existing names in place, append new ones at the end."""
    pairs = _pairs(defs)
    names = [n for n, _ in pairs]
    dup = {n for n in names if names.count(n) > 1}
    if dup:
        raise ParameterError(f"duplicate parameter names: {sorted(dup)}")
    new = dict((n, _to_expr(d)) for n, d in pairs)
    params = [Parameter(p.name, new.pop(p.name)) if p.name in new else p for p in ps.params]
    params += [Parameter(n, e) for n, e in new.items()]
    _check_references(params, ps.survival)
    return ParameterSet(tuple(params), ps.survival)


@dataclass
class ParameterTable:
    cycles: int
    columns: dict = field(default_factory=dict)

    def __getitem__(self, name):
        return self.columns[name]

    def to_frame(self) -> pd.DataFrame:
        df = pd.DataFrame({"cycle": np.arange(1, self.cycles + 1)})
        for k, v in self.columns.items():
            df[k] = v
        return df

    def head(self, n: int) -> "ParameterTable":
        return ParameterTable(n, {k: v[:n].copy() for k, v in self.columns.items()})


def evaluate_parameters(
    ps: ParameterSet,
    ctx: EvalContext,
    names: Optional[Iterable[str]] = None,
    base: Optional[Mapping[str, np.ndarray]] = None,
) -> ParameterTable:
    """Evaluate parameters in declaration order.

    ``names`` restricts evaluation to a subset (the others must be provided
    by ``base``); later definitions see earlier columns.
    """
    wanted = set(ps.names if names is None else names)
    bindings = dict(base or {})
    bindings.update(ctx.bindings)
    extensions = dict(ctx.extensions)
    if ps.survival and "compute_surv" not in extensions:
        extensions["compute_surv"] = compute_surv_extension(ps.survival)
    columns = {}
    for p in ps.params:
        if p.name not in wanted:
            continue
        local = EvalContext(ctx.cycles, ctx.strategy, bindings, ctx.state_time,
                            ctx.first_cycle_undiscounted, extensions)
        try:
            col = eval_expression(p.expr, local)
        except ExprError as err:
            raise ParameterError(f"parameter {p.name!r}: {err}") from err
        if not np.all(np.isfinite(col)):
            raise ParameterError(f"parameter {p.name!r}: non-finite values {col.tolist()}")
        columns[p.name] = bindings[p.name] = col
    return ParameterTable(ctx.cycles, columns)
