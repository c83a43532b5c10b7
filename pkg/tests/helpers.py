"""Small builders shared by the tests."""

from __future__ import annotations

from pathlib import Path

from cohortsim.model import ModelSpec, StateSpec, StrategySpec, TransitionSpec
from cohortsim.params import build_parameter_set

SHAME = Path(__file__).resolve().parents[1] / "src" / "cohortsim" / "data" / "shame" / "model.toml"


def make_model(params, matrix, states, values=None, strategies=("s",), **run):
    """One transition shared by every strategy; values default to cost = 1
    and effect = 1 in every state."""
    ps = build_parameter_set(params)
    values = values or {s: {"cost": 1, "effect": 1} for s in states}
    tr = TransitionSpec.define(states, matrix)
    st = {s: StateSpec.define(**values[s]) for s in states}
    strats = {name: StrategySpec(name, tr, st) for name in strategies}
    run.setdefault("cost", "cost")
    run.setdefault("effect", "effect")
    return ModelSpec(ps, strats, **run)


# --------------------------------------------------------------------------
# acceptance bookkeeping: filled by test_acceptance, printed by conftest

ACCEPTANCE: dict = {}  # number -> (title, passed, seconds, note)


def criterion(number: int, title: str, budget: float = None):
    """Record the outcome and runtime of an acceptance test.

    A run slower than ``budget`` seconds fails the criterion.
    """
    import functools
    import time

    def deco(fn):
        @functools.wraps(fn)
        def wrapper(*args, **kwargs):
            t0 = time.perf_counter()
            try:
                fn(*args, **kwargs)
            except BaseException as err:
                ACCEPTANCE[number] = (title, False, time.perf_counter() - t0, type(err).__name__)
                raise
            dt = time.perf_counter() - t0
            ok = budget is None or dt < budget
            ACCEPTANCE[number] = (title, ok, dt, "" if ok else f"over the {budget:g} s budget")
            assert ok, f"criterion {number} took {dt:.2f} s, budget {budget:g} s"

        return wrapper

    return deco
