"""Model documents: TOML files with named sections of ``key = value`` entries.

Expressions are strings handed verbatim to the expression parser; see the
README for the full section reference.
"""

from __future__ import annotations

import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional


from . import survival as sv
from .expr import (
    BUILTIN_NAMES,
    RESERVED,
    Expr,
    ExprError,
    ExprSyntaxError,
    Name,
    Number,
    calls,
    identifiers,
    literal_value,
    parse_expression,
)
from .lifetable import LifeTable, LifeTableError
from .model import C, ModelError, ModelSpec, StateSpec, StrategySpec, TransitionSpec
from .params import ParameterError, SurvivalDecl, build_parameter_set, validate_survival
from .uncertainty import DsaSpec, Marginal, PopulationTable, PsaSpec, UncertaintyError, define_correlation

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


class ModelFileError(ValueError):
    def __init__(self, path, section: str, key: Optional[str], message: str, offset: Optional[int] = None):
        self.path, self.section, self.key, self.offset = str(path), section, key, offset
        where = f"[{section}]" + (f" {key}" if key else "")
        at = f" at offset {offset}" if offset is not None else ""
        super().__init__(f"{path}: {where}{at}: {message}")


@dataclass
class LoadedModel:
    spec: ModelSpec
    path: Path
    dsa: Optional[DsaSpec] = None
    psa: Optional[PsaSpec] = None
    population: Optional[PopulationTable] = None
    thresholds: list = field(default_factory=list)
    lambdas: list = field(default_factory=list)


DEFAULT_LAMBDAS = [float(x) for x in range(0, 100001, 2500)]
_RUN_KEYS = {"cycles", "cost", "effect", "method", "init", "inflow", "state_cycle_limit",
             "first_cycle_undiscounted", "lifetable", "thresholds", "lambdas"}
_SECTIONS = {"strategies", "run", "parameters", "survival", "states", "transition", "dsa", "psa", "population"}


class _Loader:
    def __init__(self, path: Path):
        self.path = path
        self.base = path.parent

    def fail(self, section, key, message, offset=None):
        raise ModelFileError(self.path, section, key, message, offset)

    def expr(self, section, key, value) -> Expr:
        if isinstance(value, bool):
            self.fail(section, key, "expected an expression or number, got a boolean")
        if isinstance(value, (int, float)):
            return Number(float(value))
        if not isinstance(value, str):
            self.fail(section, key, f"expected an expression string or number, got {type(value).__name__}")
        try:
            return parse_expression(value)
        except ExprSyntaxError as err:
            self.fail(section, key, f"syntax error, expected {err.expected}", err.offset)

    def number(self, section, key, value) -> float:
        try:
            return literal_value(self.expr(section, key, value))
        except ExprError as err:
            self.fail(section, key, str(err))

    def string(self, section, key, value) -> str:
        if not isinstance(value, str):
            self.fail(section, key, f"expected a string, got {type(value).__name__}")
        return value

    def integer(self, section, key, value, minimum=1) -> int:
        if isinstance(value, bool) or not isinstance(value, int) or value < minimum:
            self.fail(section, key, f"expected an integer >= {minimum}, got {value!r}")
        return value

    def names(self, section, key, value) -> list:
        if not isinstance(value, list) or not value or not all(isinstance(x, str) for x in value):
            self.fail(section, key, "expected a non-empty list of names")
        if len(set(value)) != len(value):
            self.fail(section, key, "duplicate names")
        return value

    def file(self, section, key, value) -> Path:
        if not isinstance(value, str):
            self.fail(section, key, "expected a file path")
        p = Path(value)
        p = p if p.is_absolute() else self.base / p
        if not p.exists():
            self.fail(section, key, f"file not found: {p}")
        return p

    def table(self, doc, name, required=True) -> dict:
        t = doc.get(name)
        if t is None:
            if required:
                self.fail(name, None, "section is missing")
            return {}
        if not isinstance(t, dict):
            self.fail(name, None, "expected a section of key = value entries")
        return t

    # ----------------------------------------------------------------------

    def load(self) -> LoadedModel:
        try:
            doc = tomllib.loads(self.path.read_text(encoding="utf-8"))
        except tomllib.TOMLDecodeError as err:
            self.fail("document", None, str(err))
        except OSError as err:
            self.fail("document", None, str(err))
        unknown = set(doc) - _SECTIONS
        if unknown:
            self.fail(sorted(unknown)[0], None, f"unknown section; expected one of {sorted(_SECTIONS)}")

        run = self.table(doc, "run")
        for k in run:
            if k not in _RUN_KEYS:
                self.fail("run", k, f"unknown key; expected one of {sorted(_RUN_KEYS)}")
        lifetable = None
        if "lifetable" in run:
            try:
                lifetable = LifeTable.read_csv(self.file("run", "lifetable", run["lifetable"]))
            except LifeTableError as err:
                self.fail("run", "lifetable", str(err))

        survival = self.survival(self.table(doc, "survival", required=False))
        params_doc = self.table(doc, "parameters", required=False)
        defs = [(k, self.expr("parameters", k, v)) for k, v in params_doc.items()]
        try:
            params = build_parameter_set(defs, survival)
        except ParameterError as err:
            key = next((k for k, _ in defs if repr(k) in str(err)), None)
            self.fail("parameters", key, str(err))
        functions = BUILTIN_NAMES | {"compute_surv"} | ({"mortality_prob"} if lifetable else set())
        for k, e in defs:
            self.check_calls("parameters", k, e, functions, survival)

        strategies = self.names("strategies", None, doc.get("strategies"))

        states_doc = self.table(doc, "states")
        known = set(params.names) | RESERVED
        states = {}
        for sname, values in states_doc.items():
            if not isinstance(values, dict):
                self.fail(f"states.{sname}", None, "expected a section of value expressions")
            vals, seen = [], set()
            for k, v in values.items():
                e = self.expr(f"states.{sname}", k, v)
                missing = identifiers(e) - known - seen - set(survival) - set(strategies)
                if missing:
                    self.fail(f"states.{sname}", k, f"unresolved reference to {sorted(missing)}")
                self.check_calls(f"states.{sname}", k, e, functions, survival)
                vals.append((k, e))
                seen.add(k)
            states[sname] = StateSpec(tuple(vals))

        trans_doc = self.table(doc, "transition")
        strat_specs = {}
        for s in strategies:
            if s not in trans_doc:
                self.fail("transition", s, f"no transition matrix for strategy {s!r}")
            tspec = self.transition(s, trans_doc[s], list(states), known, functions, survival)
            try:
                strat_specs[s] = StrategySpec(s, tspec, {n: states[n] for n in tspec.state_names if n in states})
            except ModelError as err:
                self.fail(f"transition.{s}", None, str(err))
        extra = set(trans_doc) - set(strategies)
        if extra:
            self.fail("transition", sorted(extra)[0], "transition for a strategy not listed in 'strategies'")

        state_names = next(iter(strat_specs.values())).state_names
        for k in ("cost", "effect"):
            if k not in run:
                self.fail("run", k, f"missing required key {k!r}")
        undiscounted = run.get("first_cycle_undiscounted", True)
        if not isinstance(undiscounted, bool):
            self.fail("run", "first_cycle_undiscounted", "expected true or false")
        kwargs = dict(
            parameters=params, strategies=strat_specs,
            cost=self.string("run", "cost", run["cost"]), effect=self.string("run", "effect", run["effect"]),
            cycles=self.integer("run", "cycles", run.get("cycles", 10)),
            method=self.string("run", "method", run.get("method", "life-table")),
            first_cycle_undiscounted=undiscounted, lifetable=lifetable,
        )
        if "init" in run:
            kwargs["init"] = tuple(self.per_state("init", run["init"], state_names, number=True))
        if "inflow" in run:
            kwargs["inflow"] = tuple(self.per_state("inflow", run["inflow"], state_names, number=False))
        if "state_cycle_limit" in run:
            lim = run["state_cycle_limit"]
            if isinstance(lim, dict):
                bad = set(lim) - set(state_names)
                if bad:
                    self.fail("run", "state_cycle_limit", f"unknown states {sorted(bad)}")
                kwargs["state_cycle_limit"] = {k: self.integer("run", "state_cycle_limit", v)
                                               for k, v in lim.items()}
            else:
                kwargs["state_cycle_limit"] = self.integer("run", "state_cycle_limit", lim)
        try:
            spec = ModelSpec(**kwargs)
        except (ModelError, TypeError) as err:
            self.fail("run", None, str(err))

        out = LoadedModel(spec, self.path)
        for k in ("thresholds", "lambdas"):
            if not isinstance(run.get(k, []), list):
                self.fail("run", k, "expected a list of numbers")
        out.thresholds = [self.number("run", "thresholds", x) for x in run.get("thresholds", [])]
        out.lambdas = [self.number("run", "lambdas", x) for x in run.get("lambdas", [])] or list(DEFAULT_LAMBDAS)
        if "dsa" in doc:
            out.dsa = self.dsa(self.table(doc, "dsa"), params.names)
        if "psa" in doc:
            out.psa = self.psa(self.table(doc, "psa"), params.names)
        if "population" in doc:
            pop = self.table(doc, "population")
            path = self.file("population", "file", pop.get("file"))
            try:
                out.population = PopulationTable.read_csv(path)
            except (UncertaintyError, ValueError, KeyError) as err:
                self.fail("population", "file", str(err))
            bad = set(out.population.overrides.columns) - set(params.names)
            if bad:
                self.fail("population", "file", f"columns are not model parameters: {sorted(bad)}")
        return out

    def check_calls(self, section, key, e, functions, survival):
        for c in calls(e):
            if c.func not in functions:
                self.fail(section, key, f"unknown function {c.func!r}")
            if c.func == "compute_surv":
                if not c.args or not isinstance(c.args[0], Name) or c.args[0].name not in survival:
                    self.fail(section, key, "compute_surv() must name a distribution from [survival]")

    def per_state(self, key, value, state_names, number):
        if isinstance(value, dict):
            bad = set(value) - set(state_names)
            if bad:
                self.fail("run", key, f"unknown states {sorted(bad)}")
            value = [value.get(s, 0) for s in state_names]
        if not isinstance(value, list) or len(value) != len(state_names):
            self.fail("run", key, f"expected {len(state_names)} entries (one per state) or a table by state")
        if number:
            return [self.number("run", key, v) for v in value]
        return [self.expr("run", key, v) for v in value]

    def transition(self, strategy, t, state_order, known, functions, survival) -> TransitionSpec:
        section = f"transition.{strategy}"
        if not isinstance(t, dict) or "matrix" not in t:
            self.fail(section, None, "expected 'matrix' (and optionally 'states')")
        names = self.names(section, "states", t.get("states", state_order))
        matrix = t["matrix"]
        n = len(names)
        if not isinstance(matrix, list) or len(matrix) != n or any(not isinstance(r, list) or len(r) != n for r in matrix):
            self.fail(section, "matrix", f"expected {n} rows of {n} entries")
        rows = []
        for i, row in enumerate(matrix):
            entries = []
            for j, v in enumerate(row):
                key = f"matrix[{i}][{j}]"
                if isinstance(v, str) and v.strip() == "C":
                    entries.append(C)
                    continue
                e = self.expr(section, key, v)
                missing = identifiers(e) - known - set(survival)
                if missing:
                    self.fail(section, key, f"unresolved reference to {sorted(missing)}")
                self.check_calls(section, key, e, functions, survival)
                entries.append(e)
            if sum(x is C for x in entries) > 1:
                self.fail(section, f"matrix[{i}]", "at most one complement 'C' per row")
            rows.append(tuple(entries))
        try:
            return TransitionSpec(tuple(names), tuple(rows))
        except ModelError as err:
            self.fail(section, None, str(err))

    def survival(self, doc) -> dict:
        decls = {}
        for name, d in doc.items():
            section = f"survival.{name}"
            if not isinstance(d, dict):
                self.fail(section, None, "expected a section")
            d = dict(d)
            if name in RESERVED:
                self.fail(section, None, "reserved name")
            km = None
            if "data" in d:
                path = self.file(section, "data", d.pop("data"))
                try:
                    km = sv.km_estimate(*sv.read_survival_data(path))
                except (sv.SurvivalError, ValueError, KeyError) as err:
                    self.fail(section, "data", str(err))
            if "distribution" in d:
                family = self.string(section, "distribution", d.pop("distribution"))
                if family not in sv.FAMILIES:
                    self.fail(section, "distribution", f"unknown distribution {family!r}")
                _, pnames = sv.FAMILIES[family]
                if set(d) != set(pnames):
                    self.fail(section, None, f"{family} takes parameters {list(pnames)}, got {sorted(d)}")
                args = tuple((k, (self.expr(section, k, d[k]),)) for k in pnames)
                kind = "data" if km is not None else "parametric"
                decls[name] = SurvivalDecl(name, kind, family, args, (), km)
            elif km is not None:
                if d:
                    self.fail(section, sorted(d)[0], "unexpected key next to 'data' without 'distribution'")
                decls[name] = SurvivalDecl(name, "data", km=km)
            elif "op" in d:
                op = self.string(section, "op", d.pop("op"))
                of = d.pop("of", None)
                of = [of] if isinstance(of, str) else of
                if not isinstance(of, list) or not all(isinstance(x, str) for x in of):
                    self.fail(section, "of", "expected a distribution name or a list of names")
                args = []
                for k, v in d.items():
                    vals = v if isinstance(v, list) else [v]
                    args.append((k, tuple(self.expr(section, k, x) for x in vals)))
                expected = {"apply_hr": {"hr"}, "apply_or": {"or"}, "apply_af": {"af"}, "join": {"at"},
                            "pool": {"weights"}, "add_hazards": set()}
                if op not in expected:
                    self.fail(section, "op", f"unknown operation {op!r}; choose from {sorted(expected)}")
                if set(d) != expected[op]:
                    self.fail(section, None, f"{op} takes keys {sorted(expected[op] | {'of'})}")
                decls[name] = SurvivalDecl(name, op, None, tuple(args), tuple(of))
            else:
                self.fail(section, None, "expected 'distribution', 'data' or 'op'")
            try:
                validate_survival(decls)
            except ParameterError as err:
                self.fail(section, None, str(err))
        return decls

    def dsa(self, doc, names) -> DsaSpec:
        entries = []
        for k, v in doc.items():
            if k not in names:
                self.fail("dsa", k, "not a model parameter")
            if not isinstance(v, list) or len(v) != 2:
                self.fail("dsa", k, "expected [low, high]")
            entries.append((k, self.number("dsa", k, v[0]), self.number("dsa", k, v[1])))
        try:
            return DsaSpec(tuple(entries))
        except UncertaintyError as err:
            self.fail("dsa", None, str(err))

    def psa(self, doc, names) -> PsaSpec:
        doc = dict(doc)
        corr = doc.pop("correlation", [])
        marginals = {}
        for k, v in doc.items():
            if k not in names:
                self.fail("psa", k, "not a model parameter")
            if not isinstance(v, str):
                self.fail("psa", k, "expected a distribution such as \"normal(mean = 0, sd = 1)\"")
            try:
                marginals[k] = Marginal.parse(v)
            except ExprSyntaxError as err:
                self.fail("psa", k, f"syntax error, expected {err.expected}", err.offset)
            except (UncertaintyError, ExprError) as err:
                self.fail("psa", k, str(err))
        if not isinstance(corr, list) or any(not isinstance(t, list) or len(t) != 3 for t in corr):
            self.fail("psa", "correlation", "expected a list of [name_a, name_b, rho] triples")
        try:
            R = define_correlation(list(marginals), [(a, b, float(r)) for a, b, r in corr])
            return PsaSpec(marginals, R)
        except (UncertaintyError, ValueError, TypeError) as err:
            self.fail("psa", "correlation", str(err))


def load_model(path) -> LoadedModel:
    """Read and fully validate a model document."""
    return _Loader(Path(path)).load()
