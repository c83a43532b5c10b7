"""Deterministic and probabilistic sensitivity analysis, heterogeneity."""

from __future__ import annotations

import csv
import io
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from functools import partial
from pathlib import Path
from typing import Callable, Mapping, Optional, Sequence

import numpy as np
import pandas as pd
from scipy import stats

from .analysis import FrontierResult, StrategyTotals, efficiency_frontier
from .engine import run_model
from .expr import Call, literal_value, parse_expression
from .lifetable import SEX_CODES
from .model import ModelSpec


class UncertaintyError(ValueError):
    pass


# --------------------------------------------------------------------------
# Work distribution


def _guarded(fn, item):
    try:
        return True, fn(item)
    except Exception as err:  # reported with the item index by the caller
        return False, f"{type(err).__name__}: {err}"


def parallel_map(fn: Callable, items: Sequence, workers: int = 1) -> list:
    """Ordered map; results do not depend on ``workers``.

    Returns ``(ok, value_or_message)`` pairs.
    """
    items = list(items)
    if workers <= 1 or len(items) < 2:
        return [_guarded(fn, x) for x in items]
    chunk = max(1, len(items) // (4 * workers))
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(partial(_guarded, fn), items, chunksize=chunk))


# --------------------------------------------------------------------------
# DSA


@dataclass(frozen=True)
class DsaSpec:
    entries: tuple  # ((parameter, low, high), ...)

    def __post_init__(self):
        names = [p for p, _, _ in self.entries]
        if len(set(names)) != len(names):
            raise UncertaintyError("a parameter appears twice in the DSA")
        for p, lo, hi in self.entries:
            if lo > hi:
                raise UncertaintyError(f"DSA {p!r}: low bound {lo} exceeds high bound {hi}")

    @classmethod
    def define(cls, *triples) -> "DsaSpec":
        return cls(tuple((str(p), float(lo), float(hi)) for p, lo, hi in triples))

    @property
    def parameters(self) -> list:
        return [p for p, _, _ in self.entries]


def _run_totals(spec: ModelSpec, values: Mapping[str, float]) -> dict:
    res = run_model(spec.with_parameter_values(values))
    return {s: r.totals for s, r in res.strategies.items()}


@dataclass
class DsaResult:
    table: pd.DataFrame
    base: dict  # strategy -> totals
    cost: str
    effect: str

    def tornado(self, result: Optional[str] = None) -> pd.DataFrame:
        """One row per (strategy, parameter): base, low and high results,
        sorted by the width of the swing."""
        col = result or self.cost
        rows = []
        ok = self.table[self.table["error"] == ""]
        for (strategy, param), g in ok.groupby(["strategy", "parameter"], sort=False):
            by = dict(zip(g["bound"], g[col]))
            if "low" in by and "high" in by:
                base = self.base[strategy][col]
                rows.append((strategy, col, param, base, by["low"], by["high"], abs(by["high"] - by["low"])))
        df = pd.DataFrame(rows, columns=["strategy", "result", "parameter", "base", "low", "high", "range"])
        return df.sort_values(["strategy", "range"], ascending=[True, False], kind="stable").reset_index(drop=True)


def run_dsa(spec: ModelSpec, dsa: DsaSpec, workers: int = 1) -> DsaResult:
    """Two runs per parameter (low and high bound), others at base."""
    unknown = set(dsa.parameters) - set(spec.parameters.names)
    if unknown:
        raise UncertaintyError(f"DSA parameters not defined in the model: {sorted(unknown)}")
    base = _run_totals(spec, {})
    jobs = [(p, b, v) for p, lo, hi in dsa.entries for b, v in (("low", lo), ("high", hi))]
    outs = parallel_map(partial(_dsa_job, spec), jobs, workers)
    vnames = list(next(iter(base.values())))
    # per-value columns; skip the ones already shown as cost/effect, rename other clashes
    fixed = {"cost": spec.cost, "effect": spec.effect}
    extra = [k for k in vnames if fixed.get(k) != k]
    labels = [f"value_{k}" if k in fixed or k in ("parameter", "bound", "parameter_value", "strategy", "error")
              else k for k in extra]
    rows = []
    for (p, b, v), (ok, out) in zip(jobs, outs):
        for s in spec.strategy_names:
            tot = out[s] if ok else {k: np.nan for k in vnames}
            rows.append([p, b, v, s, tot[spec.cost], tot[spec.effect]] + [tot[k] for k in extra]
                        + ["" if ok else str(out)])
    cols = ["parameter", "bound", "parameter_value", "strategy", "cost", "effect"] + labels + ["error"]
    table = pd.DataFrame(rows, columns=cols)
    return DsaResult(table, base, spec.cost, spec.effect)


def _dsa_job(spec, job):
    p, _, v = job
    return _run_totals(spec, {p: v})


# --------------------------------------------------------------------------
# PSA sampling


MARGINALS = {
    "normal": ("mean", "sd"),
    "lognormal": ("mean", "sd"),
    "gamma": ("mean", "sd"),
    "binomial": ("prob", "size"),
    "poisson": ("mean",),
    "fixed": ("value",),
}


@dataclass(frozen=True)
class Marginal:
    kind: str
    params: tuple  # values in MARGINALS[kind] order

    def __post_init__(self):
        if self.kind not in MARGINALS:
            raise UncertaintyError(f"unknown distribution {self.kind!r}; choose from {sorted(MARGINALS)}")
        if len(self.params) != len(MARGINALS[self.kind]):
            raise UncertaintyError(f"{self.kind} takes {MARGINALS[self.kind]}")
        p = dict(zip(MARGINALS[self.kind], self.params))
        if "sd" in p and not p["sd"] > 0:
            raise UncertaintyError(f"{self.kind}: sd must be positive")
        if self.kind in ("lognormal", "gamma", "poisson") and not p["mean"] > 0:
            raise UncertaintyError(f"{self.kind}: mean must be positive")
        if self.kind == "binomial":
            if not 0 <= p["prob"] <= 1:
                raise UncertaintyError("binomial: prob must lie in [0, 1]")
            if p["size"] < 1 or p["size"] != int(p["size"]):
                raise UncertaintyError("binomial: size must be an integer >= 1")

    @classmethod
    def parse(cls, text: str) -> "Marginal":
        """Parse ``normal(mean = 20, sd = 5)`` style definitions."""
        e = parse_expression(text)
        if not isinstance(e, Call) or e.func not in MARGINALS:
            raise UncertaintyError(f"expected one of {sorted(MARGINALS)}(...), got {text!r}")
        names = MARGINALS[e.func]
        vals = dict(zip(names, e.args))
        for k, v in e.kwargs:
            if k not in names or k in vals:
                raise UncertaintyError(f"{e.func}: bad argument {k!r}")
            vals[k] = v
        if set(vals) != set(names):
            raise UncertaintyError(f"{e.func} needs arguments {names}")
        return cls(e.func, tuple(literal_value(vals[k]) for k in names))

    def __str__(self):
        args = ", ".join(f"{k} = {v!r}" for k, v in zip(MARGINALS[self.kind], self.params))
        return f"{self.kind}({args})"

    @property
    def _dist(self):
        p = dict(zip(MARGINALS[self.kind], self.params))
        if self.kind == "normal":
            return stats.norm(p["mean"], p["sd"])
        if self.kind == "lognormal":
            s2 = np.log1p((p["sd"] / p["mean"]) ** 2)
            return stats.lognorm(np.sqrt(s2), scale=np.exp(np.log(p["mean"]) - s2 / 2))
        if self.kind == "gamma":
            shape = (p["mean"] / p["sd"]) ** 2
            return stats.gamma(shape, scale=p["sd"] ** 2 / p["mean"])
        if self.kind == "binomial":
            return stats.binom(int(p["size"]), p["prob"])
        if self.kind == "poisson":
            return stats.poisson(p["mean"])
        return None

    def ppf(self, u) -> np.ndarray:
        u = np.asarray(u, dtype=float)
        if self.kind == "fixed":
            return np.full(u.shape, self.params[0])
        out = self._dist.ppf(u)
        if self.kind == "binomial":
            out = out / self.params[1]
        return np.asarray(out, dtype=float)

    def mean(self) -> float:
        if self.kind == "fixed":
            return self.params[0]
        m = self._dist.mean()
        return m / self.params[1] if self.kind == "binomial" else m

    def sd(self) -> float:
        if self.kind == "fixed":
            return 0.0
        s = self._dist.std()
        return s / self.params[1] if self.kind == "binomial" else s


@dataclass(frozen=True, eq=False)
class PsaSpec:
    marginals: Mapping[str, Marginal]
    correlation: Optional[np.ndarray] = None  # over marginals, in order

    def __post_init__(self):
        p = len(self.marginals)
        if self.correlation is None:
            object.__setattr__(self, "correlation", np.eye(p))
        R = np.asarray(self.correlation, dtype=float)
        object.__setattr__(self, "correlation", R)
        if R.shape != (p, p):
            raise UncertaintyError(f"correlation matrix must be {p} x {p}")
        if not np.allclose(R, R.T, atol=0) or np.any(np.diag(R) != 1) or np.any(np.abs(R) > 1):
            raise UncertaintyError("correlation must be symmetric with unit diagonal and entries in [-1, 1]")
        try:
            np.linalg.cholesky(R)
        except np.linalg.LinAlgError:
            raise UncertaintyError("correlation matrix is not positive definite") from None

    @property
    def names(self) -> list:
        return list(self.marginals)

    @classmethod
    def define(cls, marginals: Mapping[str, object], correlation: Sequence = ()) -> "PsaSpec":
        """``marginals`` values are :class:`Marginal` or text such as
        ``"gamma(mean = 5000, sd = 1000)"``; ``correlation`` holds
        ``(name_a, name_b, rho)`` triples."""
        ms = {k: v if isinstance(v, Marginal) else Marginal.parse(str(v)) for k, v in marginals.items()}
        return cls(ms, define_correlation(list(ms), correlation))


def define_correlation(names: Sequence[str], triples: Sequence) -> np.ndarray:
    idx = {n: i for i, n in enumerate(names)}
    R = np.eye(len(names))
    seen = set()
    for a, b, rho in triples:
        if a not in idx or b not in idx:
            raise UncertaintyError(f"correlation between {a!r} and {b!r}: both need a PSA distribution")
        if a == b:
            raise UncertaintyError(f"correlation of {a!r} with itself")
        key = frozenset((a, b))
        if key in seen:
            raise UncertaintyError(f"correlation between {a!r} and {b!r} given twice")
        seen.add(key)
        R[idx[a], idx[b]] = R[idx[b], idx[a]] = float(rho)
    return R


def sample_psa(psa: PsaSpec, n: int, seed: int) -> pd.DataFrame:
    """Correlated draws through a Gaussian copula.

    Draw ``i`` uses its own generator seeded with ``(seed, i)``.
    """
    if n < 1:
        raise UncertaintyError("the number of draws must be >= 1")
    p = len(psa.marginals)
    L = np.linalg.cholesky(psa.correlation)
    z = np.empty((n, p))
    for i in range(n):
        z[i] = np.random.default_rng([seed, i]).standard_normal(p)
    u = stats.norm.cdf(z @ L.T)
    u = np.clip(u, np.finfo(float).tiny, 1 - np.finfo(float).eps)
    return pd.DataFrame({name: m.ppf(u[:, j]) for j, (name, m) in enumerate(psa.marginals.items())})


# --------------------------------------------------------------------------
# PSA runs


@dataclass
class PsaResult:
    draws: pd.DataFrame  # (N, parameters)
    strategies: list
    costs: np.ndarray  # (N, S)
    effects: np.ndarray  # (N, S)
    seed: Optional[int] = None

    @property
    def n(self) -> int:
        return self.costs.shape[0]

    def nmb(self, lam: float) -> np.ndarray:
        return lam * self.effects - self.costs


def _psa_job(spec: ModelSpec, values: dict):
    res = run_model(spec.with_parameter_values(values))
    return [(res.cost(s), res.effect(s)) for s in spec.strategy_names]


def run_psa(spec: ModelSpec, psa: PsaSpec, n: int, seed: int, workers: int = 1) -> PsaResult:
    """One full model run per draw; an invalid draw aborts the analysis."""
    unknown = set(psa.names) - set(spec.parameters.names)
    if unknown:
        raise UncertaintyError(f"PSA parameters not defined in the model: {sorted(unknown)}")
    draws = sample_psa(psa, n, seed)
    rows = draws.to_dict("records")
    outs = parallel_map(partial(_psa_job, spec), rows, workers)
    for i, (ok, out) in enumerate(outs):
        if not ok:
            raise UncertaintyError(f"PSA draw {i} is invalid: {out}")
    arr = np.array([out for _, out in outs], dtype=float)  # (N, S, 2)
    return PsaResult(draws, spec.strategy_names, arr[:, :, 0], arr[:, :, 1], seed)


@dataclass
class PsaSummary:
    means: pd.DataFrame  # strategy -> cost, effect
    frontier: FrontierResult


def psa_summary(result: PsaResult) -> PsaSummary:
    means = pd.DataFrame(
        {"cost": result.costs.mean(axis=0), "effect": result.effects.mean(axis=0)}, index=result.strategies
    )
    totals = [StrategyTotals(s, means.loc[s, "cost"], means.loc[s, "effect"]) for s in result.strategies]
    return PsaSummary(means, efficiency_frontier(totals))


def ceac(result: PsaResult, lambdas: Sequence[float]) -> pd.DataFrame:
    """Share of draws in which each strategy has the highest NMB.

    Ties go to the strategy listed first.
    """
    rows = []
    S = len(result.strategies)
    for lam in lambdas:
        best = np.argmax(result.nmb(lam), axis=1)  # first maximum wins
        counts = np.bincount(best, minlength=S)
        rows += [(float(lam), s, counts[j] / result.n) for j, s in enumerate(result.strategies)]
    return pd.DataFrame(rows, columns=["lambda", "strategy", "probability"])


def evpi(result: PsaResult, lambdas: Sequence[float]) -> pd.DataFrame:
    """``E[max NMB] - max E[NMB]`` per threshold."""
    rows = []
    for lam in lambdas:
        v = result.nmb(lam)
        rows.append((float(lam), float(v.max(axis=1).mean() - v.mean(axis=0).max())))
    return pd.DataFrame(rows, columns=["lambda", "evpi"])


def export_psa(result: PsaResult, path=None) -> str:
    """One row per draw: parameters, then ``cost_<s>`` and ``effect_<s>``."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    params = list(result.draws.columns)
    w.writerow(params + [f"cost_{s}" for s in result.strategies] + [f"effect_{s}" for s in result.strategies])
    values = result.draws.to_numpy(float)
    for i in range(result.n):
        w.writerow([repr(float(x)) for x in values[i]]
                   + [repr(float(x)) for x in result.costs[i]]
                   + [repr(float(x)) for x in result.effects[i]])
    text = buf.getvalue()
    if path is not None:
        Path(path).write_text(text, encoding="utf-8")
    return text


def read_psa(path) -> PsaResult:
    """Inverse of :func:`export_psa`.

    Strategy columns are the trailing block of ``effect_*`` columns and the
    equally long block before it, so parameter names may start with
    ``cost_`` or ``effect_``.
    """
    with open(path, newline="", encoding="utf-8") as f:
        rows = list(csv.reader(f))
    header, data = rows[0], rows[1:]
    S = 0
    while S < len(header) and header[len(header) - 1 - S].startswith("effect_"):
        S += 1
    # the cost block must mirror the effect block
    while S > 0:
        effects = header[len(header) - S:]
        costs = header[len(header) - 2 * S: len(header) - S]
        if [c[5:] for c in costs if c.startswith("cost_")] == [e[7:] for e in effects]:
            break
        S -= 1
    if S == 0:
        raise UncertaintyError(f"{path}: no cost_/effect_ strategy columns")
    p = len(header) - 2 * S
    arr = np.array(data, dtype=float).reshape(len(data), len(header))
    draws = pd.DataFrame(arr[:, :p], columns=header[:p])
    strategies = [e[7:] for e in header[p + S:]]
    return PsaResult(draws, strategies, arr[:, p:p + S], arr[:, p + S:])


# --------------------------------------------------------------------------
# Heterogeneity


@dataclass
class PopulationTable:
    overrides: pd.DataFrame  # one column per overridden parameter
    weights: np.ndarray

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=float)
        if len(self.weights) != len(self.overrides):
            raise UncertaintyError("one weight per population row is required")
        if len(self.overrides) == 0:
            raise UncertaintyError("population table is empty")
        if np.any(~(self.weights > 0)):
            raise UncertaintyError("population weights must be positive")

    @classmethod
    def from_frame(cls, df: pd.DataFrame) -> "PopulationTable":
        df = df.copy()
        weights = df.pop(".weights").to_numpy(float) if ".weights" in df.columns else np.ones(len(df))
        for col in df.columns:
            if df[col].dtype == object:
                codes = df[col].map(lambda x: SEX_CODES.get(x, x))
                try:
                    df[col] = codes.astype(float)
                except (TypeError, ValueError):
                    raise UncertaintyError(f"population column {col!r} has non-numeric values") from None
        return cls(df.astype(float), weights)

    @classmethod
    def read_csv(cls, path) -> "PopulationTable":
        return cls.from_frame(pd.read_csv(path))


@dataclass
class HeterogeneityResult:
    rows: pd.DataFrame  # row, weight, strategy, cost, effect, <totals>
    weighted: pd.DataFrame  # strategy -> weighted mean of every total
    frontier: FrontierResult

    def to_frame(self) -> pd.DataFrame:
        return self.rows[["row", "weight", "strategy", "cost", "effect"]]


def update_heterogeneity(spec: ModelSpec, pop: PopulationTable, workers: int = 1) -> HeterogeneityResult:
    """Run the model once per population row and average with weights."""
    unknown = set(pop.overrides.columns) - set(spec.parameters.names)
    if unknown:
        raise UncertaintyError(f"population columns are not model parameters: {sorted(unknown)}")
    records = pop.overrides.to_dict("records")
    outs = parallel_map(partial(_run_totals, spec), records, workers)
    rows = []
    for i, (ok, out) in enumerate(outs):
        if not ok:
            raise UncertaintyError(f"population row {i + 1}: {out}")
        for s in spec.strategy_names:
            tot = out[s]
            rows.append({"row": i + 1, "weight": pop.weights[i], "strategy": s,
                         "cost": tot[spec.cost], "effect": tot[spec.effect], **tot})
    df = pd.DataFrame(rows)
    w = pop.weights / pop.weights.sum()
    value_cols = [c for c in df.columns if c not in ("row", "weight", "strategy")]
    weighted = pd.DataFrame(
        {c: [float(np.dot(w, df.loc[df["strategy"] == s, c].to_numpy())) for s in spec.strategy_names]
         for c in value_cols},
        index=spec.strategy_names,
    )
    totals = [StrategyTotals(s, weighted.loc[s, "cost"], weighted.loc[s, "effect"]) for s in spec.strategy_names]
    return HeterogeneityResult(df, weighted, efficiency_frontier(totals))
