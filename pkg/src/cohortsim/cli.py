"""Command line: run, dsa, psa, update, validate and diagram a model file."""

from __future__ import annotations

import argparse
import logging
import sys
import warnings
from pathlib import Path

from . import uncertainty as unc
from .analysis import AnalysisError, format_summary
from .engine import RunError, run_model, write_frame
from .expr import ExprError
from .lifetable import LifeTableError
from .model import ModelError, transition_dot
from .modelfile import LoadedModel, ModelFileError, load_model
from .params import ParameterError
from .survival import SurvivalError

ERRORS = (ModelFileError, ModelError, ParameterError, ExprError, RunError, AnalysisError,
          unc.UncertaintyError, SurvivalError, LifeTableError, OSError)


class CliError(Exception):
    pass


def _load(args) -> LoadedModel:
    m = load_model(args.model)
    changes = {}
    if getattr(args, "cycles", None) is not None:
        changes["cycles"] = args.cycles
    if getattr(args, "method", None) is not None:
        changes["method"] = args.method
    if changes:
        m.spec = m.spec.replace(**changes)
    return m


def _outdir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _frontier_block(title: str, means, frontier) -> str:
    lines = [title, "", means.to_string(float_format=lambda v: f"{v:.7g}"), "", "Efficiency frontier:", "",
             " -> ".join(frontier.frontier)]
    if frontier.steps:
        lines += [""] + [f"{s.strategy} vs {s.reference}: ICER {s.icer:.7g}" for s in frontier.steps]
    if frontier.dominated:
        lines += [""] + [f"{k}: {v}" for k, v in frontier.dominated.items()]
    return "\n".join(lines) + "\n"


def cmd_run(args) -> int:
    m = _load(args)
    res = run_model(m.spec)
    res.write_csv(_outdir(args))
    sys.stdout.write(format_summary(res, m.thresholds))
    return 0


def cmd_dsa(args) -> int:
    m = _load(args)
    if m.dsa is None:
        raise CliError("the model file has no [dsa] section")
    res = unc.run_dsa(m.spec, m.dsa, args.threads)
    out = _outdir(args)
    write_frame(res.table, out / "dsa.csv")
    write_frame(res.tornado(), out / "tornado.csv")
    failed = (res.table["error"] != "").sum()
    sys.stdout.write(f"{len(m.dsa.entries)} parameters, {len(res.table)} rows written to {out / 'dsa.csv'}\n")
    if failed:
        sys.stdout.write(f"{failed} rows failed; see the error column\n")
    return 0


def cmd_psa(args) -> int:
    m = _load(args)
    if m.psa is None:
        raise CliError("the model file has no [psa] section")
    res = unc.run_psa(m.spec, m.psa, args.draws, args.seed, args.threads)
    out = _outdir(args)
    unc.export_psa(res, out / "psa.csv")
    write_frame(unc.ceac(res, m.lambdas), out / "ceac.csv")
    write_frame(unc.evpi(res, m.lambdas), out / "evpi.csv")
    summ = unc.psa_summary(res)
    sys.stdout.write(f"{res.n} draws, seed {args.seed}.\n\n")
    sys.stdout.write(_frontier_block("Mean values:", summ.means, summ.frontier))
    return 0


def cmd_update(args) -> int:
    m = _load(args)
    pop = unc.PopulationTable.read_csv(args.population) if args.population else m.population
    if pop is None:
        raise CliError("no population table: pass --population or add a [population] section")
    res = unc.update_heterogeneity(m.spec, pop, args.threads)
    out = _outdir(args)
    write_frame(res.to_frame(), out / "heterogeneity.csv")
    sys.stdout.write(f"{len(pop.weights)} population rows.\n\n")
    sys.stdout.write(_frontier_block("Weighted mean values:", res.weighted[["cost", "effect"]], res.frontier))
    return 0


def cmd_validate(args) -> int:
    m = _load(args)
    # a full run surfaces evaluation errors (probabilities, divisions) too
    run_model(m.spec)
    spec = m.spec
    sys.stdout.write(
        f"ok: {len(spec.strategy_names)} strategies, {len(spec.state_names)} states, "
        f"{len(spec.parameters)} parameters, {spec.cycles} cycles\n"
    )
    return 0


def cmd_diagram(args) -> int:
    m = _load(args)
    if args.strategy not in m.spec.strategies:
        raise CliError(f"unknown strategy {args.strategy!r}; choose from {m.spec.strategy_names}")
    sys.stdout.write(transition_dot(m.spec.strategies[args.strategy]))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cohortsim", description="Markov cohort cost-effectiveness models.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help, out=True, overrides=True):
        sp = sub.add_parser(name, help=help)
        sp.add_argument("model", help="model file (TOML)")
        if out:
            sp.add_argument("--out", default=".", help="output directory (default: current)")
        if overrides:
            sp.add_argument("--cycles", type=int, help="override the number of cycles")
            sp.add_argument("--method", choices=["start", "end", "life-table"], help="override the counting method")
        sp.set_defaults(func=fn)
        return sp

    add("run", cmd_run, "run every strategy and write totals, counts and values")
    add("dsa", cmd_dsa, "one-way deterministic sensitivity analysis").add_argument(
        "--threads", type=int, default=1, help="worker processes (results do not depend on it)")
    sp = add("psa", cmd_psa, "probabilistic sensitivity analysis")
    sp.add_argument("--draws", type=int, required=True, help="number of draws")
    sp.add_argument("--seed", type=int, required=True, help="random seed")
    sp.add_argument("--threads", type=int, default=1, help="worker processes (results do not depend on it)")
    sp = add("update", cmd_update, "run over a population table and average with weights")
    sp.add_argument("--population", help="population CSV (default: the model's [population] file)")
    sp.add_argument("--threads", type=int, default=1, help="worker processes (results do not depend on it)")
    add("validate", cmd_validate, "load and run the model, report problems", out=False)
    add("diagram", cmd_diagram, "print a strategy's transition diagram as DOT", out=False, overrides=False
        ).add_argument("--strategy", required=True, help="strategy to draw")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    for attr in ("draws", "threads", "cycles"):
        v = getattr(args, attr, None)
        if v is not None and v < 1:
            print(f"error: --{attr} must be at least 1", file=sys.stderr)
            return 2
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("always")
            warnings.showwarning = lambda msg, *a, **k: print(f"warning: {msg}", file=sys.stderr)
            return args.func(args)
    except (CliError, *ERRORS) as err:
        msg = " ".join(str(err).split())
        print(f"error: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
