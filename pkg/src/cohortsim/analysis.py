"""ICERs, efficiency frontier and net monetary benefit."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
import pandas as pd


class AnalysisError(ValueError):
    pass


@dataclass(frozen=True)
class StrategyTotals:
    name: str
    cost: float
    effect: float
    other: Mapping[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if not (np.isfinite(self.cost) and np.isfinite(self.effect)):
            raise AnalysisError(f"{self.name}: non-finite totals")


def icer(a: StrategyTotals, b: StrategyTotals) -> float:
    """Incremental cost per unit of effect of ``b`` over ``a``."""
    de = b.effect - a.effect
    if de == 0:
        raise AnalysisError(f"ICER undefined between {a.name!r} and {b.name!r}: equal effects")
    return (b.cost - a.cost) / de


@dataclass
class FrontierStep:
    strategy: str
    reference: str
    cost_diff: float
    effect_diff: float
    icer: float


@dataclass
class FrontierResult:
    frontier: list  # strategy names, effect ascending
    steps: list  # FrontierStep per frontier member after the first
    dominated: dict  # name -> reason

    def to_frame(self) -> pd.DataFrame:
        rows = []
        first = self.frontier[0] if self.frontier else None
        if first is not None:
            rows.append((first, "frontier", "", np.nan, np.nan, np.nan))
        for s in self.steps:
            rows.append((s.strategy, "frontier", s.reference, s.cost_diff, s.effect_diff, s.icer))
        for name, reason in self.dominated.items():
            rows.append((name, reason, "", np.nan, np.nan, np.nan))
        return pd.DataFrame(rows, columns=["strategy", "status", "reference", "cost_diff", "effect_diff", "icer"])


def _as_totals(totals) -> list[StrategyTotals]:
    if isinstance(totals, Mapping):
        return [t if isinstance(t, StrategyTotals) else StrategyTotals(k, *t) for k, t in totals.items()]
    return list(totals)


def efficiency_frontier(totals) -> FrontierResult:
    """Drop strictly and extendedly dominated strategies.

    ``totals`` is a sequence of :class:`StrategyTotals` or a mapping
    ``name -> (cost, effect)``.
    """
    items = _as_totals(totals)
    order = {t.name: i for i, t in enumerate(items)}
    items = sorted(items, key=lambda t: (t.effect, t.cost, order[t.name]))
    dominated = {}
    kept = []
    for t in items:
        for o in items:
            if o is t or o.name in dominated:
                continue
            better = o.cost <= t.cost and o.effect >= t.effect
            strict = o.cost < t.cost or o.effect > t.effect
            if better and (strict or order[o.name] < order[t.name]):
                dominated[t.name] = f"dominated by {o.name}"
                break
        else:
            kept.append(t)
    while True:
        ratios = [icer(kept[i], kept[i + 1]) for i in range(len(kept) - 1)]
        bad = next((i for i in range(len(ratios) - 1) if ratios[i] >= ratios[i + 1]), None)
        if bad is None:
            break
        victim = kept.pop(bad + 1)
        dominated[victim.name] = f"extendedly dominated ({kept[bad].name} -> {kept[bad + 1].name})"
    steps = [
        FrontierStep(b.name, a.name, b.cost - a.cost, b.effect - a.effect, r)
        for a, b, r in zip(kept, kept[1:], ratios)
    ]
    return FrontierResult([t.name for t in kept], steps, dominated)


@dataclass
class NmbResult:
    table: pd.DataFrame  # rows: strategies, columns: thresholds
    best: dict  # threshold -> strategy name

    def differences(self) -> pd.DataFrame:
        """Best NMB minus each strategy's NMB (0 for the best)."""
        return self.table.max(axis=0) - self.table

    def to_frame(self) -> pd.DataFrame:
        diff = self.differences()
        rows = [
            (lam, s, self.table.loc[s, lam], diff.loc[s, lam], s == self.best[lam])
            for lam in self.table.columns
            for s in self.table.index
        ]
        return pd.DataFrame(rows, columns=["lambda", "strategy", "nmb", "difference", "best"])


def nmb(totals, thresholds: Sequence[float]) -> NmbResult:
    """Net monetary benefit ``lambda * effect - cost`` at each threshold.

    Ties go to the strategy earliest on the efficiency frontier, then to
    model order.
    """
    items = _as_totals(totals)
    lams = [float(x) for x in thresholds]
    if any(lam < 0 for lam in lams):
        raise AnalysisError("thresholds must be non-negative")
    names = [t.name for t in items]
    table = pd.DataFrame(
        {lam: [lam * t.effect - t.cost for t in items] for lam in lams}, index=names
    )
    fr = efficiency_frontier(items)
    rank = {n: (fr.frontier.index(n) if n in fr.frontier else len(items) + i) for i, n in enumerate(names)}
    best = {}
    for lam in lams:
        col = table[lam]
        top = col.max()
        best[lam] = min((n for n in names if col[n] == top), key=rank.get)
    return NmbResult(table, best)


def _fmt(x) -> str:
    return f"{x:.7g}" if isinstance(x, float) else str(x)


def _table(df: pd.DataFrame) -> str:
    return df.to_string(float_format=lambda v: f"{v:.7g}")


def format_summary(result, thresholds=()) -> str:
    """Text summary: values, NMB differences, frontier and differences.

    Differences are reported per individual (totals divided by the initial
    cohort size), like ICERs they are unaffected by cohort size.
    """
    spec = result.spec
    names = result.strategy_names
    n = len(names)
    init = spec.init_counts()
    size = float(init.sum()) or 1.0
    lines = [f"{n} strateg{'y' if n == 1 else 'ies'} run for {spec.cycles} cycles.", "", "Initial state counts:", ""]
    lines += [f"{s} = {_fmt(float(c))}" for s, c in zip(spec.state_names, init)]
    lines += ["", f"Counting method: '{spec.method}'.", "", "Values:", "", _table(result.totals_table())]
    per_person = [StrategyTotals(s, result.cost(s) / size, result.effect(s) / size) for s in names]
    if thresholds:
        res = nmb(per_person, thresholds)
        lines += ["", "Net monetary benefit difference:", "", _table(res.differences())]
        lines += [""] + [f"Highest NMB at {_fmt(lam)}: {s}" for lam, s in res.best.items()]
    if n > 1:
        fr = efficiency_frontier(per_person)
        lines += ["", "Efficiency frontier:", "", " -> ".join(fr.frontier)]
        if fr.steps:
            diff = pd.DataFrame(
                [(s.cost_diff, s.effect_diff, s.icer, s.reference) for s in fr.steps],
                index=[s.strategy for s in fr.steps],
                columns=["Cost Diff.", "Effect Diff.", "ICER", "Ref."],
            )
            lines += ["", "Differences:", "", _table(diff)]
        if fr.dominated:
            lines += ["", "Dominated:", ""] + [f"{k}: {v}" for k, v in fr.dominated.items()]
    return "\n".join(lines) + "\n"
