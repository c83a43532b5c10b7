import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cohortsim.engine import _contexts, run_cohort, run_model
from cohortsim.model import (
    Complement,
    ModelError,
    TransitionError,
    TransitionSpec,
    detect_state_time,
    eval_transition,
    expand_tunnels,
    transition_dot,
)
from cohortsim.modelfile import load_model
from helpers import SHAME, make_model
from oracles import SemiMarkovCase


def two_state(T=3, **run):
    return make_model(
        {"pba": 0.1, "f": "0.1 * state_time"},
        [["C", "f"], ["pba", "C"]],
        ["A", "B"], cycles=T, **run,
    )


def forced_counts(spec, name, flagged, limit=None):
    strat = spec.strategies[name]
    exp = expand_tunnels(strat, spec.cycles, flagged, limit)
    U = eval_transition(exp, _contexts(spec, name, {s for s in exp.state_time if s is not None}))
    x0 = np.zeros(exp.n)
    for i, s in enumerate(strat.state_names):
        x0[exp.entry_index(s)] = spec.init_counts()[i]
    return run_cohort(x0, None, U) @ exp.aggregation(), U


def test_shame_model_flags_pre_and_symp():
    spec = load_model(SHAME).spec
    for s in spec.strategy_names:
        assert detect_state_time(spec.strategies[s], spec.parameters) == {"pre", "symp"}


def test_model_time_only_flags_nothing():
    spec = make_model({"p": "0.01 * model_time"}, [["C", "p"], [0, 1]], ["A", "B"])
    assert detect_state_time(spec.strategies["s"], spec.parameters) == set()


def test_transitive_dependency_flags_state():
    spec = make_model(
        {"a": "state_time", "b": "a * 2", "p": 0.1}, [["C", "p"], [0, 1]], ["A", "B"],
        values={"A": {"cost": "b", "effect": 1}, "B": {"cost": 0, "effect": 0}},
    )
    assert detect_state_time(spec.strategies["s"], spec.parameters) == {"A"}


def test_expansion_structure():
    spec = two_state(T=3)
    exp = expand_tunnels(spec.strategies["s"], 3, {"A"})
    assert exp.names == ("A[1]", "A[2]", "A[3]", "B")
    assert exp.state_time == (1, 2, 3, None)
    # A[s] -> A[s+1] carries the self transition, A[3] loops, B re-enters A[1]
    pattern = {(r, c): ("C" if isinstance(e, Complement) else "e") for (r, c), e in exp.cells.items()}
    assert pattern == {
        (0, 1): "C", (0, 3): "e",
        (1, 2): "C", (1, 3): "e",
        (2, 2): "C", (2, 3): "e",
        (3, 0): "e", (3, 3): "C",
    }
    U, = [eval_transition(exp, _contexts(spec, "s", {1, 2, 3}))]
    assert U.shape == (3, 4, 4)
    assert np.allclose(U[:, 0, 3], 0.1) and np.allclose(U[:, 1, 3], 0.2) and np.allclose(U[:, 2, 3], 0.3)


def test_no_flags_is_identity():
    spec = two_state()
    strat = spec.strategies["s"]
    exp = expand_tunnels(strat, 3, set())
    assert exp.names == strat.state_names
    assert np.array_equal(exp.aggregation(), np.eye(2))


def test_limit_one_pins_state_time():
    T = 8
    spec = two_state(T=T, state_cycle_limit=1)
    pinned = make_model({"pba": 0.1, "f": "0.1 * 1"}, [["C", "f"], ["pba", "C"]], ["A", "B"], cycles=T)
    a = run_model(spec).strategies["s"].counts
    b = run_model(pinned).strategies["s"].counts
    assert np.allclose(a, b, rtol=0, atol=1e-10)


def test_limit_at_horizon_equals_no_limit():
    case = SemiMarkovCase(np.random.default_rng(3), 9)
    kw = dict(cycles=9, init=tuple(case.init))
    free = make_model(case.parameters(), case.transition(), ["A", "B", "D"], **kw)
    capped = make_model(case.parameters(), case.transition(), ["A", "B", "D"], state_cycle_limit=9, **kw)
    assert np.array_equal(run_model(free).strategies["s"].counts, run_model(capped).strategies["s"].counts)


def test_absorbing_flagged_state_is_not_expanded():
    spec = make_model(
        {"p": 0.2}, [["C", "p"], [0, 1]], ["A", "D"],
        values={"A": {"cost": 1, "effect": 1}, "D": {"cost": "state_time", "effect": 0}},
    )
    with pytest.warns(UserWarning, match="absorbing"):
        with pytest.raises(Exception, match="state_time"):
            run_model(spec)


def test_constant_rows_and_complement():
    spec = make_model({"a": 0.25, "b": 0.05}, [["C", "a", "b"], [0, "C", 0.1], [0, 0, 1]], ["A", "B", "D"], cycles=4)
    exp = expand_tunnels(spec.strategies["s"], 4, set())
    U = eval_transition(exp, _contexts(spec, "s", set()))
    assert np.allclose(U[:, 0], [0.70, 0.25, 0.05], atol=1e-15)
    assert np.array_equal(U[:, 2], np.tile([0, 0, 1], (4, 1)))


def test_row_exceeding_one_is_located():
    spec = make_model({"a": 0.7}, [["C", "a", "a"], [0, 1, 0], [0, 0, 1]], ["A", "B", "D"])
    with pytest.raises(Exception, match="row A sums to 1.4") as info:
        run_model(spec)
    assert isinstance(info.value.__cause__, TransitionError)
    assert info.value.__cause__.cycle == 1


def test_probability_out_of_range_is_located():
    spec = make_model({"p": "0.3 * model_time"}, [["C", "p"], [0, 1]], ["A", "B"], cycles=5)
    with pytest.raises(Exception, match="cycle 4") as info:
        run_model(spec)
    err = info.value.__cause__
    assert (err.cycle, err.state) == (4, "A")


def test_row_without_complement_must_sum_to_one():
    spec = make_model({}, [[0.5, 0.4], [0, 1]], ["A", "B"])
    with pytest.raises(Exception, match="not 1"):
        run_model(spec)


def test_two_complements_rejected():
    with pytest.raises(ModelError, match="complement"):
        TransitionSpec.define(["A", "B"], "C", "C", 0, 1)


def test_diagram_lists_nonzero_edges():
    spec = load_model(SHAME).spec
    dot = transition_dot(spec.strategies["base"])
    assert dot.startswith('digraph "base" {')
    assert '"pre" -> "symp" [label="p_disease_base"];' in dot
    assert '"death" -> "pre"' not in dot


# --- properties ---------------------------------------------------------


@given(st.integers(0, 10_000), st.integers(1, 12))
@settings(max_examples=25, deadline=None)
def test_tunnel_counts_match_dwell_time_oracle(seed, T):
    case = SemiMarkovCase(np.random.default_rng(seed), T)
    spec = make_model(case.parameters(), case.transition(), ["A", "B", "D"], cycles=T, init=tuple(case.init))
    res = run_model(spec).strategies["s"]
    assert np.allclose(res.counts, case.counts(), rtol=0, atol=1e-10)
    # mass is preserved by expansion followed by aggregation
    assert np.allclose(res.expanded_counts.sum(axis=1), case.init.sum(), rtol=0, atol=1e-9)


@given(st.integers(0, 10_000), st.integers(1, 10), st.integers(1, 10))
@settings(max_examples=25, deadline=None)
def test_capped_tunnels_match_capped_oracle(seed, T, limit):
    case = SemiMarkovCase(np.random.default_rng(seed), T)
    spec = make_model(case.parameters(), case.transition(), ["A", "B", "D"], cycles=T,
                      init=tuple(case.init), state_cycle_limit=limit)
    assert np.allclose(run_model(spec).strategies["s"].counts, case.counts(limit), rtol=0, atol=1e-10)


@given(st.integers(0, 10_000), st.integers(1, 10))
@settings(max_examples=25, deadline=None)
def test_forced_expansion_without_state_time(seed, T):
    rng = np.random.default_rng(seed)
    p = rng.uniform(0, 0.3, 4)
    spec = make_model(
        {"p1": p[0], "p2": f"{p[1]} * model_time / {T}", "p3": p[2], "p4": p[3]},
        [["C", "p1", "p2"], ["p3", "C", "p4"], [0, 0, 1]], ["A", "B", "D"], cycles=T,
    )
    plain, _ = forced_counts(spec, "s", set())
    forced, U = forced_counts(spec, "s", {"A", "B"})
    assert np.allclose(plain, forced, rtol=0, atol=1e-12)
    assert np.allclose(U.sum(axis=2), 1.0, atol=1e-12) and np.all(U >= 0)
