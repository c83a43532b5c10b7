import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cohortsim.engine import run_model
from cohortsim.uncertainty import (
    DsaSpec,
    Marginal,
    PopulationTable,
    PsaResult,
    PsaSpec,
    UncertaintyError,
    ceac,
    evpi,
    export_psa,
    psa_summary,
    read_psa,
    run_dsa,
    run_psa,
    sample_psa,
    update_heterogeneity,
)
from helpers import make_model
from oracles import spearman


def toy(strategies=("a", "b")):
    """Two strategies sharing a 2-state model; ``extra`` is used nowhere."""
    return make_model(
        {"p": 0.2, "c_sick": 500, "u": 0.8, "extra": 3},
        [["C", "p"], [0, 1]], ["well", "sick"],
        values={"well": {"cost": 100, "effect": "u"}, "sick": {"cost": "c_sick", "effect": 0.3}},
        strategies=strategies, cycles=5,
    )


def fake_result(costs, effects, strategies=("x", "y")):
    costs, effects = np.asarray(costs, float), np.asarray(effects, float)
    return PsaResult(pd.DataFrame({"q": np.arange(len(costs), dtype=float)}), list(strategies), costs, effects)


# --- DSA ----------------------------------------------------------------


def test_dsa_bounds_at_base_reproduce_base():
    spec = toy()
    res = run_dsa(spec, DsaSpec.define(("p", 0.2, 0.2), ("c_sick", 500, 500)))
    for _, row in res.table.iterrows():
        assert row["cost"] == res.base[row["strategy"]]["cost"]
        assert row["effect"] == res.base[row["strategy"]]["effect"]


def test_dsa_unused_parameter_changes_nothing():
    spec = toy()
    res = run_dsa(spec, DsaSpec.define(("extra", -100, 100)))
    for _, row in res.table.iterrows():
        assert row["cost"] == res.base[row["strategy"]]["cost"]


def test_dsa_cost_only_parameter_is_linear():
    spec = toy()
    res = run_dsa(spec, DsaSpec.define(("c_sick", 0, 1000)))
    t = res.table[res.table["strategy"] == "a"].set_index("bound")
    base = res.base["a"]
    assert t.loc["low", "effect"] == t.loc["high", "effect"] == base["effect"]
    assert t.loc["low", "cost"] < base["cost"] < t.loc["high", "cost"]
    assert base["cost"] - t.loc["low", "cost"] == pytest.approx(t.loc["high", "cost"] - base["cost"], rel=1e-12)


def test_dsa_invalid_bound_reported_per_row():
    res = run_dsa(toy(), DsaSpec.define(("p", 0.1, 1.5), ("c_sick", 0, 1)))
    bad = res.table[(res.table["parameter"] == "p") & (res.table["bound"] == "high")]
    assert (bad["error"] != "").all() and bad["cost"].isna().all()
    good = res.table[res.table["parameter"] == "c_sick"]
    assert (good["error"] == "").all()
    assert list(res.tornado()["parameter"].unique()) == ["c_sick"]


def test_dsa_validation():
    with pytest.raises(UncertaintyError):
        DsaSpec.define(("p", 0.3, 0.1))
    with pytest.raises(UncertaintyError, match="not defined"):
        run_dsa(toy(), DsaSpec.define(("nope", 0, 1)))


# --- sampling -------------------------------------------------------------


MARGINAL_TEXT = [
    "normal(mean = 20, sd = 5)",
    "lognormal(mean = 2000, sd = 200)",
    "gamma(mean = 15, sd = 3)",
    "binomial(prob = 0.3, size = 50)",
    "poisson(mean = 4)",
]


def test_marginal_moments_within_four_standard_errors():
    psa = PsaSpec.define({f"x{i}": t for i, t in enumerate(MARGINAL_TEXT)})
    draws = sample_psa(psa, 10_000, seed=7)
    n = len(draws)
    for name, m in psa.marginals.items():
        x = draws[name].to_numpy()
        mu, sd = m.mean(), m.sd()
        assert abs(x.mean() - mu) <= 4 * sd / np.sqrt(n), name
        # standard error of the sample sd, with the fourth moment estimated from the draws
        kurt = np.mean((x - mu) ** 4) / sd ** 4
        assert abs(x.std(ddof=1) - sd) <= 4 * sd * np.sqrt((kurt - 1) / (4 * n)), name


def test_normal_mean_example():
    x = sample_psa(PsaSpec.define({"a": "normal(mean = 20, sd = 5)"}), 10_000, seed=1)["a"]
    assert abs(x.mean() - 20) <= 0.15


def test_negative_rank_correlation():
    psa = PsaSpec.define(
        {"shape": "normal(mean = 1, sd = 0.1)", "scale": "normal(mean = 2, sd = 0.2)"},
        [("shape", "scale", -0.5)],
    )
    d = sample_psa(psa, 10_000, seed=42)
    rho = spearman(d["shape"], d["scale"])
    assert -0.55 <= rho <= -0.41


def test_binomial_draws_on_grid():
    x = sample_psa(PsaSpec.define({"p": "binomial(prob = 0.25, size = 500)"}), 2000, seed=3)["p"].to_numpy()
    k = x * 500
    assert np.array_equal(k, np.round(k)) and x.min() >= 0 and x.max() <= 1


def test_sampling_is_seed_deterministic():
    psa = PsaSpec.define({"a": "gamma(mean = 5, sd = 1)", "b": "normal(mean = 0, sd = 1)"}, [("a", "b", 0.3)])
    a, b = sample_psa(psa, 50, 11), sample_psa(psa, 50, 11)
    assert a.equals(b)
    assert not a.equals(sample_psa(psa, 50, 12))
    # draw i does not depend on how many draws are requested
    assert sample_psa(psa, 20, 11).equals(a.head(20))


def test_psa_spec_validation():
    with pytest.raises(UncertaintyError, match="positive definite"):
        PsaSpec.define({"a": "normal(mean = 0, sd = 1)", "b": "normal(mean = 0, sd = 1)",
                        "c": "normal(mean = 0, sd = 1)"},
                       [("a", "b", 0.9), ("a", "c", 0.9), ("b", "c", -0.9)])
    with pytest.raises(UncertaintyError):
        Marginal.parse("normal(mean = 0, sd = 0)")
    with pytest.raises(UncertaintyError):
        Marginal.parse("binomial(prob = 0.5, size = 0)")
    with pytest.raises(UncertaintyError):
        Marginal.parse("beta(a = 1, b = 2)")
    with pytest.raises(UncertaintyError):
        PsaSpec.define({"a": "poisson(mean = 1)"}, [("a", "zz", 0.1)])
    with pytest.raises(UncertaintyError):
        sample_psa(PsaSpec.define({"a": "poisson(mean = 1)"}), 0, 1)


def test_marginal_text_round_trip():
    for t in MARGINAL_TEXT:
        assert Marginal.parse(str(Marginal.parse(t))) == Marginal.parse(t)


kinds = st.sampled_from(MARGINAL_TEXT)


@given(kinds, kinds, st.sampled_from([-0.8, -0.4, 0.4, 0.8]), st.integers(0, 1000))
@settings(max_examples=30, deadline=None)
def test_copula_preserves_sign_of_correlation(ka, kb, rho, seed):
    d = sample_psa(PsaSpec.define({"a": ka, "b": kb}, [("a", "b", rho)]), 2000, seed)
    assert np.sign(spearman(d["a"], d["b"])) == np.sign(rho)


# --- PSA runs ------------------------------------------------------------


def test_degenerate_psa_equals_base_run():
    spec = toy()
    psa = PsaSpec.define({"p": "fixed(value = 0.2)", "c_sick": "fixed(value = 500)"})
    res = run_psa(spec, psa, 4, seed=1)
    base = run_model(spec)
    for j, s in enumerate(res.strategies):
        assert np.all(res.costs[:, j] == base.cost(s))
        assert np.all(res.effects[:, j] == base.effect(s))


def test_single_draw_summary_is_that_run():
    spec = toy()
    res = run_psa(spec, PsaSpec.define({"c_sick": "gamma(mean = 500, sd = 100)"}), 1, seed=5)
    summ = psa_summary(res)
    drawn = run_model(spec.with_parameter_values({"c_sick": res.draws["c_sick"][0]}))
    assert summ.means.loc["a", "cost"] == drawn.cost("a")
    assert summ.means.loc["b", "effect"] == drawn.effect("b")


def test_linear_toy_mean_icer():
    # cost of b is linear in c_sick, so E[cost] is the cost at E[c_sick]
    spec = make_model(
        {"p": 0.2, "c_sick": 500, "c_b": 1000},
        [["C", "p"], [0, 1]], ["well", "sick"],
        values={"well": {"cost": 100, "effect": 1}, "sick": {"cost": "c_sick", "effect": 0.3}},
        strategies=("a",), cycles=5,
    )
    res = run_psa(spec, PsaSpec.define({"c_sick": "normal(mean = 500, sd = 50)"}), 400, seed=9)
    expected = run_model(spec).cost("a")
    sd = res.costs[:, 0].std(ddof=1)
    assert abs(res.costs[:, 0].mean() - expected) <= 4 * sd / np.sqrt(res.n)


def test_invalid_draw_aborts_with_index():
    spec = toy()
    psa = PsaSpec.define({"p": "normal(mean = 0.2, sd = 0.5)"})
    with pytest.raises(UncertaintyError, match=r"PSA draw \d+ is invalid"):
        run_psa(spec, psa, 30, seed=1)


def test_psa_export_is_worker_independent():
    spec = toy()
    psa = PsaSpec.define({"c_sick": "gamma(mean = 500, sd = 100)", "u": "normal(mean = 0.8, sd = 0.05)"},
                         [("c_sick", "u", 0.3)])
    one = export_psa(run_psa(spec, psa, 12, seed=42, workers=1))
    two = export_psa(run_psa(spec, psa, 12, seed=42, workers=2))
    assert one == two


# --- CEAC / EVPI ---------------------------------------------------------


def test_two_draw_evpi_example():
    # NMBs {(1, 0), (0, 1)} at lambda = 1 with zero cost
    r = fake_result([[0, 0], [0, 0]], [[1, 0], [0, 1]])
    assert evpi(r, [1.0])["evpi"].tolist() == [0.5]


def test_evpi_zero_when_one_strategy_always_wins():
    r = fake_result([[0, 5], [1, 7]], [[3, 1], [4, 2]])
    assert evpi(r, [0, 10, 100])["evpi"].tolist() == [0, 0, 0]


def test_ceac_ties_go_to_first_strategy():
    r = fake_result([[1, 1]], [[0, 0]])
    c = ceac(r, [0])
    assert c["probability"].tolist() == [1.0, 0.0]


def test_degenerate_ceac_is_deterministic_best():
    spec = make_model(
        {"p": 0.2, "k": 1}, [["C", "p"], [0, 1]], ["well", "sick"],
        values={"well": {"cost": 100, "effect": 1}, "sick": {"cost": 50, "effect": 0}},
        strategies=("a", "b"), cycles=3,
    )
    res = run_psa(spec, PsaSpec.define({"k": "fixed(value = 1)"}), 3, seed=0)
    c = ceac(res, [1000]).set_index("strategy")["probability"]
    assert c["a"] == 1.0 and c["b"] == 0.0


matrices = st.integers(1, 30).flatmap(
    lambda n: st.tuples(
        st.lists(st.lists(st.floats(0, 1e4), min_size=3, max_size=3), min_size=n, max_size=n),
        st.lists(st.lists(st.floats(0, 10), min_size=3, max_size=3), min_size=n, max_size=n),
    )
)


@given(matrices, st.lists(st.floats(0, 1e5), min_size=1, max_size=5, unique=True))
def test_ceac_and_evpi_properties(ce, lambdas):
    r = fake_result(*ce, strategies=("x", "y", "z"))
    c = ceac(r, lambdas)
    sums = c.groupby("lambda")["probability"].sum()
    assert np.allclose(sums, 1.0, atol=1e-12)
    assert c["probability"].between(0, 1).all()
    ev = evpi(r, lambdas)["evpi"].to_numpy()
    assert np.all(ev >= -1e-9 * (1 + np.abs(r.nmb(max(lambdas))).max()))


@given(matrices)
def test_ceac_at_zero_counts_cheapest(ce):
    r = fake_result(*ce, strategies=("x", "y", "z"))
    cheapest = np.argmin(r.costs, axis=1)  # first minimum, same tie rule
    expected = np.bincount(cheapest, minlength=3) / r.n
    assert ceac(r, [0])["probability"].tolist() == expected.tolist()


# --- export ---------------------------------------------------------------


def test_export_layout():
    r = PsaResult(pd.DataFrame({"a": [1.0, 2.0]}), ["s"], np.array([[3.0], [4.0]]), np.array([[5.0], [6.0]]))
    lines = export_psa(r).splitlines()
    assert lines[0] == "a,cost_s,effect_s"
    assert len(lines) == 3


def test_export_round_trip_with_colliding_names(tmp_path):
    draws = pd.DataFrame({"cost_x": [1.5, 2.5, 3.5], "effect_y": [0.1, 0.2, 0.3]})
    r = PsaResult(draws, ["x", "y"], np.array([[10.0, 11], [9, 12], [8, 14]]),
                  np.array([[1.0, 1.1], [0.9, 1.2], [1.3, 1.0]]))
    path = tmp_path / "psa.csv"
    export_psa(r, path)
    back = read_psa(path)
    assert list(back.draws.columns) == ["cost_x", "effect_y"]
    assert back.strategies == ["x", "y"]
    lams = [0, 5, 50]
    assert ceac(back, lams).equals(ceac(r, lams))
    assert evpi(back, lams).equals(evpi(r, lams))
    assert export_psa(back) == export_psa(r)


# --- heterogeneity -------------------------------------------------------


def test_single_row_population_equals_base():
    spec = toy()
    res = update_heterogeneity(spec, PopulationTable.from_frame(pd.DataFrame({"u": [0.8]})))
    base = run_model(spec)
    assert res.weighted.loc["a", "cost"] == base.cost("a")
    assert res.weighted.loc["b", "effect"] == base.effect("b")


def test_identical_rows_average_to_one_row():
    spec = toy()
    one = update_heterogeneity(spec, PopulationTable.from_frame(pd.DataFrame({"c_sick": [700.0]})))
    two = update_heterogeneity(spec, PopulationTable.from_frame(
        pd.DataFrame({"c_sick": [700.0, 700.0], ".weights": [1.0, 7.0]})))
    assert np.allclose(one.weighted.to_numpy(), two.weighted.to_numpy(), rtol=1e-15, atol=0)


def test_weighted_mean_arithmetic():
    # state cost equals the population parameter, so totals are 10 and 20 per person-cycle
    spec = make_model({"c": 0}, [[1, 0], [0, 1]], ["on", "off"],
                      values={"on": {"cost": "c", "effect": 1}, "off": {"cost": 0, "effect": 0}},
                      cycles=1, init=(1, 0), method="start")
    pop = PopulationTable.from_frame(pd.DataFrame({"c": [10, 20], ".weights": [1, 3]}))
    res = update_heterogeneity(spec, pop)
    assert res.weighted.loc["s", "cost"] == pytest.approx(17.5, abs=1e-12)
    assert res.to_frame().columns.tolist() == ["row", "weight", "strategy", "cost", "effect"]


def test_population_validation():
    with pytest.raises(UncertaintyError, match="not model parameters"):
        update_heterogeneity(toy(), PopulationTable.from_frame(pd.DataFrame({"zzz": [1]})))
    with pytest.raises(UncertaintyError, match="positive"):
        PopulationTable.from_frame(pd.DataFrame({"u": [1], ".weights": [0]}))
    t = PopulationTable.from_frame(pd.DataFrame({"sex": ["MLE", "FMLE"]}))
    assert t.overrides["sex"].tolist() == [1.0, 2.0]
