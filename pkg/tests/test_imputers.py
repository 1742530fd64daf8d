import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from loopate.core import Experiment, loop_estimate, simple_difference
from loopate.errors import InsufficientArm, RankDeficient, StratumTooSmall
from loopate.forest import ForestParams
from loopate.imputers import (ConstantImputer, ForestImputer, MeanImputer, OlsImputer,
                              StrataImputer, impute_mean, impute_ols, impute_strata)

from conftest import random_experiment


def _mutate(exp, i, y_new, t_new):
    y = exp.y.copy()
    t = exp.t.copy()
    y[i], t[i] = y_new, t_new
    return Experiment(y, t, exp.z, exp.p)


def test_mean_five_unit(five_unit):
    out = impute_mean(five_unit)
    assert (out.t_hat[0], out.c_hat[0], out.m_hat[0]) == (5.0, 2.0, 3.5)
    assert (out.t_hat[2], out.c_hat[2]) == (4.0, 2.5)


def test_mean_needs_two_per_arm():
    e = Experiment(np.arange(5.0), np.array([1, 0, 0, 0, 0]), np.zeros((5, 0)), 0.5)
    with pytest.raises(InsufficientArm):
        impute_mean(e)
    out = MeanImputer(fallback=0.0).impute(e)
    assert out.t_hat[0] == 0.0 and out.t_hat[1] == 0.0


def test_mean_loo_contract_five_unit(five_unit):
    mutated = _mutate(five_unit, 0, 99.0, 0)
    a = MeanImputer(fallback=0.0).impute(five_unit)
    b = MeanImputer(fallback=0.0).impute(mutated)
    assert (a.t_hat[0], a.c_hat[0]) == (b.t_hat[0], b.c_hat[0])


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), n_units=st.integers(8, 20),
       kind=st.sampled_from(["mean", "strata", "ols", "forest_exact"]))
def test_loo_contract_under_mutation(seed, n_units, kind):
    rng = np.random.default_rng(seed)
    exp = random_experiment(rng, n_units, q=2, min_arm=3)
    labels = np.arange(n_units) % 2
    imputer = {
        "mean": MeanImputer(fallback=0.0),
        "strata": StrataImputer(labels, fallback=0.0),
        "ols": OlsImputer(),
        "forest_exact": ForestImputer(ForestParams(n_trees=10, seed=seed), mode="exact_loo"),
    }[kind]
    i = int(rng.integers(n_units))
    base = imputer.impute(exp)
    mutated = imputer.impute(_mutate(exp, i, rng.standard_normal() * 50, 1 - exp.t[i]))
    assert base.t_hat[i] == pytest.approx(mutated.t_hat[i], rel=1e-9, abs=1e-9)
    assert base.c_hat[i] == pytest.approx(mutated.c_hat[i], rel=1e-9, abs=1e-9)


def test_single_stratum_matches_mean():
    rng = np.random.default_rng(0)
    for _ in range(20):
        exp = random_experiment(rng, 15)
        a = impute_strata(exp, np.zeros(15))
        b = impute_mean(exp)
        assert np.allclose(a.t_hat, b.t_hat, rtol=0, atol=1e-12)
        assert np.allclose(a.c_hat, b.c_hat, rtol=0, atol=1e-12)


def test_two_copies_match_post_stratification(five_unit):
    y = np.concatenate([five_unit.y, five_unit.y + 10])
    t = np.concatenate([five_unit.t, five_unit.t])
    exp = Experiment(y, t, np.zeros((10, 0)), 0.5)
    labels = np.repeat([0, 1], 5)
    tau = loop_estimate(exp, impute_strata(exp, labels), variance=False).tau_hat
    assert tau == pytest.approx(2.0, rel=1e-12)


def test_strata_too_small():
    t = np.array([1, 1, 0, 0, 0, 1, 1, 0])
    exp = Experiment(np.arange(8.0), t, np.zeros((8, 0)), 0.5)
    with pytest.raises(StratumTooSmall) as info:
        impute_strata(exp, np.array([0, 0, 0, 0, 0, 1, 1, 1]))
    assert info.value.stratum == 1


def test_ols_noiseless_linear():
    rng = np.random.default_rng(1)
    z = rng.standard_normal((10, 1))
    t = np.array([1, 0] * 5)
    y = 1 + 2 * t + 3 * z[:, 0]
    exp = Experiment(y, t, z, 0.5)
    out = impute_ols(exp)
    assert np.allclose(out.t_hat - out.c_hat, 2.0, atol=1e-10)
    assert loop_estimate(exp, out).tau_hat == pytest.approx(2.0, abs=1e-10)


def test_ols_without_covariates_is_simple_difference():
    rng = np.random.default_rng(2)
    for _ in range(20):
        exp = random_experiment(rng, 12)
        tau = loop_estimate(exp, impute_ols(exp), variance=False).tau_hat
        assert tau == pytest.approx(simple_difference(exp), rel=1e-10, abs=1e-12)


def test_ols_rank_deficiency():
    z = np.ones((8, 1))  # collinear with the intercept
    exp = Experiment(np.arange(8.0), np.array([1, 0] * 4), z, 0.5)
    with pytest.raises(RankDeficient):
        OlsImputer(allow_fallback=False).impute(exp)
    out = OlsImputer().impute(exp)
    assert any(c.startswith("ols_min_norm_fallback") for c in out.caveats)
    assert np.all(np.isfinite(out.m_hat))


def test_forest_constant_outcomes():
    rng = np.random.default_rng(3)
    exp = Experiment(np.full(20, 7.0), np.array([1, 0] * 10), rng.standard_normal((20, 2)), 0.5)
    for mode in ("oob", "exact_loo"):
        out = ForestImputer(ForestParams(n_trees=30, seed=5), mode=mode).impute(exp)
        assert np.all(out.t_hat == 7.0) and np.all(out.c_hat == 7.0)


def test_forest_piecewise_truth():
    rng = np.random.default_rng(4)
    z = rng.standard_normal((200, 1))
    y = np.where(z[:, 0] < 0, 0.0, 10.0)
    t = (rng.random(200) < 0.5).astype(int)
    out = ForestImputer(ForestParams(n_trees=500, seed=1)).impute(Experiment(y, t, z, 0.5))
    away = np.abs(z[:, 0]) > 0.2
    assert np.abs(out.t_hat - y)[away].mean() < 1.0
    assert np.abs(out.c_hat - y)[away].mean() < 1.0


def test_forest_oob_y_invariance():
    rng = np.random.default_rng(5)
    for _ in range(10):
        exp = random_experiment(rng, 30, q=3)
        imp = ForestImputer(ForestParams(n_trees=100, seed=9))
        i = int(rng.integers(30))
        y = exp.y.copy()
        y[i] += 100.0
        a = imp.impute(exp)
        b = imp.impute(Experiment(y, exp.t, exp.z, exp.p))
        assert a.t_hat[i] == b.t_hat[i] and a.c_hat[i] == b.c_hat[i]


def test_forest_without_covariates_uses_means(five_unit):
    out = ForestImputer(ForestParams(n_trees=5)).impute(five_unit)
    assert np.array_equal(out.m_hat, impute_mean(five_unit).m_hat)
    assert "forest_q0_mean_imputation" in out.caveats


def test_constant_imputer_ignores_data(five_unit):
    out = ConstantImputer(1.0, 2.0).impute(five_unit)
    assert np.all(out.m_hat == 1.5)
