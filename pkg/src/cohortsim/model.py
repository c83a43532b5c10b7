"""States, strategies, transition matrices and tunnel-state expansion."""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence, Union

import numpy as np

from .expr import (
    RESERVED,
    EvalContext,
    Expr,
    ExprError,
    Number,
    eval_expression,
    identifiers,
    is_constant,
    parse_expression,
    to_source,
)
from .params import ParameterSet, survival_identifiers

log = logging.getLogger(__name__)

METHODS = ("start", "end", "life-table")


class ModelError(ValueError):
    pass


class TransitionError(ModelError):
    def __init__(self, message, cycle=None, state=None, value=None):
        self.cycle, self.state, self.value = cycle, state, value
        super().__init__(message)


@dataclass(frozen=True)
class Complement:
    """Marker for ``C``: one minus the rest of the row."""

    def __repr__(self):
        return "C"


C = Complement()

Entry = Union[Expr, Complement]


def _entry(x) -> Entry:
    if isinstance(x, Complement):
        return x
    if isinstance(x, str):
        if x.strip() == "C":
            return C
        return parse_expression(x)
    if isinstance(x, (int, float)) and not isinstance(x, bool):
        return Number(float(x))
    return x


@dataclass(frozen=True)
class TransitionSpec:
    state_names: tuple
    entries: tuple  # n x n of Expr | Complement

    def __post_init__(self):
        n = len(self.state_names)
        if n < 2:
            raise ModelError("a transition matrix needs at least 2 states")
        if len(set(self.state_names)) != n:
            raise ModelError(f"duplicate state names in {self.state_names}")
        for s in self.state_names:
            if s in RESERVED:
                raise ModelError(f"{s!r} is a reserved name")
        if len(self.entries) != n or any(len(r) != n for r in self.entries):
            raise ModelError(f"transition matrix must be {n} x {n}")
        for name, row in zip(self.state_names, self.entries):
            if sum(isinstance(e, Complement) for e in row) > 1:
                raise ModelError(f"row {name!r}: at most one complement 'C' per row")

    @classmethod
    def define(cls, state_names: Sequence[str], *entries) -> "TransitionSpec":
        """Row-major entries; strings are parsed, ``"C"`` is the complement."""
        n = len(state_names)
        flat = list(entries[0]) if len(entries) == 1 and not isinstance(entries[0], str) else list(entries)
        if flat and isinstance(flat[0], (list, tuple)):
            flat = [x for row in flat for x in row]
        if len(flat) != n * n:
            raise ModelError(f"expected {n * n} transition entries, got {len(flat)}")
        rows = tuple(tuple(_entry(x) for x in flat[i * n : (i + 1) * n]) for i in range(n))
        return cls(tuple(state_names), rows)

    def is_absorbing(self, i: int) -> bool:
        for j, e in enumerate(self.entries[i]):
            if i == j:
                if not (isinstance(e, Complement) or is_constant(e, 1.0)):
                    return False
            elif isinstance(e, Complement) or not is_constant(e, 0.0):
                return False
        return True


@dataclass(frozen=True)
class StateSpec:
    values: tuple  # ((name, Expr), ...) evaluated in order

    @classmethod
    def define(cls, **values) -> "StateSpec":
        return cls(tuple((k, _entry(v)) for k, v in values.items()))

    @property
    def names(self) -> list[str]:
        return [k for k, _ in self.values]


@dataclass(frozen=True)
class StrategySpec:
    name: str
    transition: TransitionSpec
    states: Mapping[str, StateSpec]

    def __post_init__(self):
        if set(self.states) != set(self.transition.state_names):
            raise ModelError(
                f"strategy {self.name!r}: states {sorted(self.states)} do not match "
                f"transition states {sorted(self.transition.state_names)}"
            )
        names = [set(s.names) for s in self.states.values()]
        if any(n != names[0] for n in names):
            raise ModelError(f"strategy {self.name!r}: all states must define the same values")

    @property
    def state_names(self) -> tuple:
        return self.transition.state_names

    @property
    def value_names(self) -> list[str]:
        return self.states[self.state_names[0]].names


@dataclass(frozen=True)
class ModelSpec:
    parameters: ParameterSet
    strategies: Mapping[str, StrategySpec]
    cost: str
    effect: str
    cycles: int = 10
    method: str = "life-table"
    init: Optional[tuple] = None
    inflow: Optional[tuple] = None  # one Expr per state, new entrants per cycle
    state_cycle_limit: Union[None, int, Mapping[str, int]] = None
    first_cycle_undiscounted: bool = True
    lifetable: object = field(default=None, compare=False)

    def __post_init__(self):
        if not self.strategies:
            raise ModelError("a model needs at least one strategy")
        if int(self.cycles) != self.cycles or self.cycles < 1:
            raise ModelError(f"cycles must be an integer >= 1, got {self.cycles}")
        if self.method not in METHODS:
            raise ModelError(f"unknown counting method {self.method!r}; choose from {METHODS}")
        first = next(iter(self.strategies.values()))
        for s in self.strategies.values():
            if s.state_names != first.state_names:
                raise ModelError(f"strategy {s.name!r} uses different states than {first.name!r}")
            for v in (self.cost, self.effect):
                if v not in s.value_names:
                    raise ModelError(f"value {v!r} is not defined by the states of strategy {s.name!r}")
        n = len(first.state_names)
        if self.init is not None:
            if len(self.init) != n:
                raise ModelError(f"init needs {n} counts, got {len(self.init)}")
            if any(x < 0 for x in self.init):
                raise ModelError("init counts must be non-negative")
        if self.inflow is not None:
            if len(self.inflow) != n:
                raise ModelError(f"inflow needs {n} entries, got {len(self.inflow)}")
            for e in self.inflow:
                if "state_time" in self.refs(e):
                    raise ModelError("inflow cannot depend on state_time")
        lim = self.state_cycle_limit
        vals = lim.values() if isinstance(lim, Mapping) else ([] if lim is None else [lim])
        if any(v < 1 for v in vals):
            raise ModelError("state_cycle_limit must be >= 1")

    @property
    def state_names(self) -> tuple:
        return next(iter(self.strategies.values())).state_names

    @property
    def strategy_names(self) -> list[str]:
        return list(self.strategies)

    def init_counts(self) -> np.ndarray:
        if self.init is None:
            out = np.zeros(len(self.state_names))
            out[0] = 1000.0
            return out
        return np.asarray(self.init, dtype=float)

    def limit_for(self, state: str) -> Optional[int]:
        lim = self.state_cycle_limit
        if isinstance(lim, Mapping):
            return lim.get(state)
        return lim

    def refs(self, e: Expr) -> set[str]:
        return expr_refs(e, self.parameters)

    def replace(self, **changes) -> "ModelSpec":
        return dataclasses.replace(self, **changes)

    def with_parameter_values(self, values: Mapping[str, float]) -> "ModelSpec":
        return self.replace(parameters=self.parameters.with_values(values))


def expr_refs(e: Expr, ps: ParameterSet) -> set[str]:
    """Identifiers referenced by ``e``, closed over parameter dependencies."""
    refs = set(identifiers(e))
    for s in refs & set(ps.survival):
        refs |= survival_identifiers(ps.survival, s)
    out = set(refs)
    for name in reversed(ps.names):
        if name in out:
            out |= ps.dependencies(name)
    return out


def detect_state_time(strategy: StrategySpec, parameters: ParameterSet) -> set[str]:
    """States whose values or outgoing transitions depend on ``state_time``."""
    flagged = set()
    for i, name in enumerate(strategy.state_names):
        exprs = [e for _, e in strategy.states[name].values]
        exprs += [e for e in strategy.transition.entries[i] if not isinstance(e, Complement)]
        if any("state_time" in expr_refs(e, parameters) for e in exprs):
            flagged.add(name)
    return flagged


@dataclass(frozen=True)
class ExpandedStrategy:
    """Strategy with state-time dependent states unrolled into tunnel copies.

    ``state_time[i]`` is the dwell time bound in expanded state ``i`` (None
    for states that were not expanded); ``parent[i]`` indexes the original
    state.
    """

    name: str
    names: tuple
    parent: tuple
    state_time: tuple
    cells: Mapping  # (row, col) -> Entry; missing cells are 0
    values: tuple  # per expanded state: ((value_name, Expr), ...)
    original: StrategySpec

    @property
    def n(self) -> int:
        return len(self.names)

    def entry_index(self, state: str) -> int:
        """Expanded index where newcomers to ``state`` land."""
        return self.parent.index(self.original.state_names.index(state))

    def aggregation(self) -> np.ndarray:
        """(expanded x original) 0/1 matrix summing tunnel copies."""
        m = np.zeros((self.n, len(self.original.state_names)))
        m[np.arange(self.n), self.parent] = 1.0
        return m


def expand_tunnels(
    strategy: StrategySpec,
    cycles: int,
    flagged: Optional[set] = None,
    limit: Union[None, int, Mapping[str, int]] = None,
) -> ExpandedStrategy:
    """Unroll each flagged state ``A`` into ``A[1] .. A[L]``, ``L = min(cycles, limit)``.

    ``A[s] -> A[s+1]`` carries the self-transition evaluated at dwell time
    ``s``; ``A[L]`` loops on itself.  Entries into ``A`` from elsewhere land
    in ``A[1]``.
    """
    flagged = set(flagged or ())
    orig = strategy.state_names
    tr = strategy.transition
    lengths = {}
    for s in flagged:
        lim = limit.get(s) if isinstance(limit, Mapping) else limit
        if lim is not None and lim < 1:
            raise ModelError(f"state_cycle_limit for {s!r} must be >= 1")
        lengths[s] = cycles if lim is None else min(cycles, int(lim))

    names, parent, stime, values = [], [], [], []
    first_copy = {}
    for i, s in enumerate(orig):
        first_copy[s] = len(names)
        vals = strategy.states[s].values
        if s in flagged:
            for k in range(1, lengths[s] + 1):
                names.append(f"{s}[{k}]")
                parent.append(i)
                stime.append(k)
                values.append(vals)
        else:
            names.append(s)
            parent.append(i)
            stime.append(None)
            values.append(vals)

    cells = {}
    for r in range(len(names)):
        i = parent[r]
        src = orig[i]
        for j, e in enumerate(tr.entries[i]):
            if not isinstance(e, Complement) and is_constant(e, 0.0):
                continue
            dst = orig[j]
            if j == i and src in flagged:
                k = stime[r]
                c = r + 1 if k < lengths[src] else r
            else:
                c = first_copy[dst]
            cells[(r, c)] = e
    return ExpandedStrategy(strategy.name, tuple(names), tuple(parent), tuple(stime), cells, tuple(values), strategy)


def eval_transition(exp: ExpandedStrategy, contexts: Mapping[Optional[int], EvalContext]) -> np.ndarray:
    """Evaluate to a (T, n, n) array of row-stochastic slices.

    ``contexts[s]`` evaluates rows with dwell time ``s`` (``None`` for
    unexpanded states).
    """
    T = next(iter(contexts.values())).cycles
    n = exp.n
    U = np.zeros((T, n, n))
    rows: dict[int, list] = {}
    for (r, c), e in exp.cells.items():
        rows.setdefault(r, []).append((c, e))
    for r in range(n):
        ctx = contexts[exp.state_time[r]]
        comp = None
        for c, e in rows.get(r, []):
            if isinstance(e, Complement):
                comp = c
                continue
            try:
                v = eval_expression(e, ctx)
            except ExprError as err:
                raise TransitionError(f"{exp.name}: transition {exp.names[r]} -> {exp.names[c]}: {err}",
                                      state=exp.names[r]) from err
            bad = np.flatnonzero((v < -1e-12) | (v > 1 + 1e-12) | np.isnan(v))
            if bad.size:
                k = int(bad[0])
                raise TransitionError(
                    f"{exp.name}: probability {exp.names[r]} -> {exp.names[c]} is {v[k]} at cycle {k + 1}, "
                    f"outside [0, 1] ({to_source(e)})",
                    cycle=k + 1, state=exp.names[r], value=float(v[k]),
                )
            U[:, r, c] += np.clip(v, 0.0, 1.0)
        total = U[:, r, :].sum(axis=1)
        if comp is not None:
            over = np.flatnonzero(total > 1 + 1e-9)
            if over.size:
                k = int(over[0])
                raise TransitionError(
                    f"{exp.name}: row {exp.names[r]} sums to {total[k]} > 1 at cycle {k + 1}",
                    cycle=k + 1, state=exp.names[r], value=float(total[k]),
                )
            U[:, r, comp] += np.clip(1.0 - total, 0.0, 1.0)
        else:
            off = np.flatnonzero(np.abs(total - 1.0) > 1e-9)
            if off.size:
                k = int(off[0])
                raise TransitionError(
                    f"{exp.name}: row {exp.names[r]} sums to {total[k]}, not 1, at cycle {k + 1}",
                    cycle=k + 1, state=exp.names[r], value=float(total[k]),
                )
    return U


def transition_dot(strategy: StrategySpec) -> str:
    """Graphviz DOT text for a strategy's transition diagram."""

    def q(s):
        return '"' + s.replace("\\", "\\\\").replace('"', '\\"') + '"'

    tr = strategy.transition
    lines = [f"digraph {q(strategy.name)} {{", "  rankdir=LR;"]
    for s in tr.state_names:
        lines.append(f"  {q(s)};")
    for i, src in enumerate(tr.state_names):
        for j, e in enumerate(tr.entries[i]):
            if not isinstance(e, Complement) and is_constant(e, 0.0):
                continue
            label = "C" if isinstance(e, Complement) else to_source(e)
            lines.append(f"  {q(src)} -> {q(tr.state_names[j])} [label={q(label)}];")
    lines.append("}")
    return "\n".join(lines) + "\n"
