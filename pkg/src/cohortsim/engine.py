"""Cohort recursion, counting correction and state values."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import pandas as pd

from .expr import EvalContext, ExprError, eval_expression, evaluate_sequence
from .lifetable import mortality_extension
from .model import (
    METHODS,
    ExpandedStrategy,
    ModelError,
    ModelSpec,
    detect_state_time,
    eval_transition,
    expand_tunnels,
)
from .params import ParameterError, compute_surv_extension, evaluate_parameters

log = logging.getLogger(__name__)


class RunError(RuntimeError):
    pass


def run_cohort(init, inflow, U) -> np.ndarray:
    """``a_0 = init``; ``a_k = a_{k-1} @ U_k + Z_k``.

    Returns a (T + 1, n) count matrix; ``inflow`` may be None, a length-n
    vector applied every cycle, or a (T, n) schedule.
    """
    U = np.asarray(U, dtype=float)
    if U.ndim != 3 or U.shape[1] != U.shape[2]:
        raise RunError(f"transition array must be (T, n, n), got {U.shape}")
    T, n, _ = U.shape
    a = np.asarray(init, dtype=float)
    if a.shape != (n,):
        raise RunError(f"init has shape {a.shape}, expected ({n},)")
    if np.any(a < 0):
        raise RunError("init counts must be non-negative")
    if inflow is None:
        Z = np.zeros((T, n))
    else:
        Z = np.broadcast_to(np.asarray(inflow, dtype=float), (T, n)) if np.ndim(inflow) == 1 else np.asarray(inflow, dtype=float)
        if Z.shape != (T, n):
            raise RunError(f"inflow has shape {Z.shape}, expected ({T}, {n})")
        if np.any(Z < 0):
            raise RunError("inflow counts must be non-negative")
    out = np.empty((T + 1, n))
    out[0] = a
    for k in range(T):
        out[k + 1] = out[k] @ U[k] + Z[k]
    return out


def correct_counts(counts: np.ndarray, method: str = "life-table") -> np.ndarray:
    """Within-cycle membership for cycles 1..T."""
    counts = np.asarray(counts, dtype=float)
    if method == "start":
        return counts[:-1].copy()
    if method == "end":
        return counts[1:].copy()
    if method == "life-table":
        return (counts[:-1] + counts[1:]) / 2.0
    raise RunError(f"unknown counting method {method!r}; choose from {METHODS}")


def compute_state_values(corrected: np.ndarray, state_values: np.ndarray) -> np.ndarray:
    """Sum of count x value over states.

    ``corrected`` is (T, n); ``state_values`` is (n, T, V).  Returns (T, V).
    """
    corrected = np.asarray(corrected, dtype=float)
    state_values = np.asarray(state_values, dtype=float)
    if state_values.ndim != 3 or state_values.shape[:2] != (corrected.shape[1], corrected.shape[0]):
        raise RunError(
            f"state values of shape {state_values.shape} do not match counts of shape {corrected.shape}"
        )
    return np.einsum("tn,ntv->tv", corrected, state_values)


@dataclass
class StrategyResult:
    name: str
    state_names: tuple
    value_names: list
    counts: np.ndarray  # (T + 1, n), tunnel copies aggregated
    values: np.ndarray  # (T, V)
    expanded: ExpandedStrategy = field(repr=False)
    expanded_counts: np.ndarray = field(repr=False)

    @property
    def totals(self) -> dict:
        return dict(zip(self.value_names, self.values.sum(axis=0).tolist()))


@dataclass
class RunResult:
    spec: ModelSpec
    strategies: dict

    @property
    def strategy_names(self) -> list:
        return list(self.strategies)

    def cost(self, strategy: str) -> float:
        return self.strategies[strategy].totals[self.spec.cost]

    def effect(self, strategy: str) -> float:
        return self.strategies[strategy].totals[self.spec.effect]

    def totals_table(self) -> pd.DataFrame:
        rows = {s: r.totals for s, r in self.strategies.items()}
        return pd.DataFrame.from_dict(rows, orient="index")

    def counts_frame(self) -> pd.DataFrame:
        parts = []
        for s, r in self.strategies.items():
            T1, n = r.counts.shape
            parts.append(pd.DataFrame({
                "strategy": s,
                "cycle": np.repeat(np.arange(T1), n),
                "state": np.tile(r.state_names, T1),
                "count": r.counts.ravel(),
            }))
        return pd.concat(parts, ignore_index=True)

    def values_frame(self) -> pd.DataFrame:
        parts = []
        for s, r in self.strategies.items():
            T, V = r.values.shape
            parts.append(pd.DataFrame({
                "strategy": s,
                "cycle": np.repeat(np.arange(1, T + 1), V),
                "value_name": np.tile(r.value_names, T),
                "amount": r.values.ravel(),
            }))
        return pd.concat(parts, ignore_index=True)

    def totals_frame(self) -> pd.DataFrame:
        rows = [(s, v, t) for s, r in self.strategies.items() for v, t in r.totals.items()]
        return pd.DataFrame(rows, columns=["strategy", "value_name", "total"])

    def summary(self, thresholds=()) -> str:
        from .analysis import format_summary

        return format_summary(self, thresholds)

    def write_csv(self, outdir) -> list[Path]:
        outdir = Path(outdir)
        outdir.mkdir(parents=True, exist_ok=True)
        paths = []
        for name, df in (("counts", self.counts_frame()), ("values", self.values_frame()),
                         ("totals", self.totals_frame())):
            p = outdir / f"{name}.csv"
            write_frame(df, p)
            paths.append(p)
        return paths


def write_frame(df: pd.DataFrame, path) -> None:
    df.to_csv(path, index=False, encoding="utf-8", lineterminator="\n")


def _extensions(spec: ModelSpec) -> dict:
    ext = {}
    if spec.parameters.survival:
        ext["compute_surv"] = compute_surv_extension(spec.parameters.survival)
    if spec.lifetable is not None:
        ext["mortality_prob"] = mortality_extension(spec.lifetable)
    return ext


def _contexts(spec: ModelSpec, strategy: str, dwell_times) -> dict:
    ps = spec.parameters
    T = spec.cycles
    ext = _extensions(spec)
    dependent = ps.depends_on("state_time")
    plain = EvalContext(T, strategy, {}, None, spec.first_cycle_undiscounted, ext)
    base = evaluate_parameters(ps, plain, names=[n for n in ps.names if n not in dependent]).columns
    contexts = {None: plain.with_bindings(base)}
    for s in sorted(dwell_times):
        st = np.full(T, float(s))
        ctx = EvalContext(T, strategy, {}, st, spec.first_cycle_undiscounted, ext)
        cols = evaluate_parameters(ps, ctx, names=dependent, base=base).columns
        contexts[s] = EvalContext(T, strategy, {**base, **cols}, st, spec.first_cycle_undiscounted, ext)
    return contexts


def run_strategy(spec: ModelSpec, name: str) -> StrategyResult:
    strat = spec.strategies[name]
    T = spec.cycles
    flagged = detect_state_time(strat, spec.parameters)
    absorbing = {s for s in flagged if strat.transition.is_absorbing(strat.state_names.index(s))}
    if absorbing:
        warnings.warn(f"{name}: absorbing states are not expanded: {', '.join(sorted(absorbing))}")
        flagged -= absorbing
    if flagged:
        ordered = [s for s in strat.state_names if s in flagged]
        log.info("%s: detected use of 'state_time', expanding states: %s.", name, ", ".join(ordered))
    exp = expand_tunnels(strat, T, flagged, spec.state_cycle_limit)
    contexts = _contexts(spec, name, {s for s in exp.state_time if s is not None})
    U = eval_transition(exp, contexts)

    x0 = np.zeros(exp.n)
    init = spec.init_counts()
    for i, s in enumerate(strat.state_names):
        x0[exp.entry_index(s)] = init[i]
    Z = None
    if spec.inflow is not None:
        Z = np.zeros((T, exp.n))
        for i, (s, e) in enumerate(zip(strat.state_names, spec.inflow)):
            Z[:, exp.entry_index(s)] = eval_expression(e, contexts[None])
    counts = run_cohort(x0, Z, U)
    corrected = correct_counts(counts, spec.method)

    vnames = strat.value_names
    per_state = np.empty((exp.n, T, len(vnames)))
    cache = {}
    for r in range(exp.n):
        key = (exp.parent[r], exp.state_time[r])
        if key not in cache:
            ev = evaluate_sequence(exp.values[r], contexts[exp.state_time[r]])
            cache[key] = np.column_stack([ev[v] for v in vnames])
        per_state[r] = cache[key]
    if not np.all(np.isfinite(per_state)):
        raise RunError(f"{name}: non-finite state values")
    values = compute_state_values(corrected, per_state)
    agg = exp.aggregation()
    return StrategyResult(name, strat.state_names, vnames, counts @ agg, values, exp, counts)


def run_model(spec: ModelSpec, strategies: Optional[list] = None) -> RunResult:
    """Evaluate parameters, expand tunnels, run the cohort and value states
    for every strategy."""
    out = {}
    for name in strategies or spec.strategy_names:
        try:
            out[name] = run_strategy(spec, name)
        except (ExprError, ParameterError, ModelError, RunError) as err:
            raise RunError(f"strategy {name!r}: {err}") from err
    return RunResult(spec, out)
