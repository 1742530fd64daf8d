import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from loopate.core import (Bernoulli, Blocked, CompleteRandomization, Experiment, ImputedOutcomes,
                          Paired, combine_m, loop_estimate, signed_weight, simple_difference,
                          unit_effect)
from loopate.errors import DomainError, InsufficientArm, NonConstantP
from loopate.imputers import ConstantImputer, MeanImputer


@pytest.mark.parametrize("t,p,expected", [(1, 0.5, 2.0), (0, 0.5, -2.0), (0, 0.25, -4 / 3)])
def test_signed_weight_examples(t, p, expected):
    assert signed_weight(t, p) == pytest.approx(expected, rel=1e-15)


@pytest.mark.parametrize("p", [0.0, 1.0, -0.1, 1.5])
def test_signed_weight_rejects_bad_p(p):
    with pytest.raises(DomainError):
        signed_weight(1, p)


@given(st.floats(0.01, 0.99))
def test_signed_weight_mean_zero(p):
    assert p * signed_weight(1, p) + (1 - p) * signed_weight(0, p) == pytest.approx(0, abs=1e-12)


@pytest.mark.parametrize("args,expected", [((2, 0, 0.5), 1.0), ((4, 4, 0.3), 4.0),
                                           ((10, 0, 0.25), 7.5)])
def test_combine_m(args, expected):
    assert combine_m(*args) == pytest.approx(expected)


def test_unit_effect_examples():
    assert unit_effect(3, 1, 2) == 4.0
    assert unit_effect(4, 3, 2) == 2.0
    assert unit_effect(2, 3, -2) == 2.0
    assert unit_effect(5, 5, -2) == 0.0


def test_simple_difference_examples(five_unit):
    assert simple_difference(five_unit) == 2.0
    flat = Experiment(np.ones(4), np.array([1, 0, 1, 0]), np.zeros((4, 0)), 0.5)
    assert simple_difference(flat) == 0.0
    e = Experiment(np.array([1.0, 2, 3, 4]), np.array([1, 0, 1, 0]), np.zeros((4, 0)), 0.5)
    assert simple_difference(e) == -1.0


def test_simple_difference_needs_both_arms():
    e = Experiment(np.ones(4), np.ones(4, dtype=int), np.zeros((4, 0)), 0.5)
    with pytest.raises(InsufficientArm):
        simple_difference(e)


def test_loop_five_unit_by_hand(five_unit):
    report = loop_estimate(five_unit, MeanImputer().impute(five_unit))
    # hand computed unit effects: m_hat = (3.5, 2.5, 3.25, 3.5, 3.25)
    assert np.allclose(report.tau_units, [-1.0, 5.0, 4.5, 2.0, -0.5])
    assert report.tau_hat == 2.0
    assert report.m_t_hat == 4.0 and report.m_c_hat == 1.5
    assert report.var_hat == pytest.approx(1.1 + 0.4 * math.sqrt(6), rel=1e-12)
    lo, hi = report.ci
    assert (lo + hi) / 2 == pytest.approx(2.0)
    assert hi - lo == pytest.approx(2 * 1.959963984540054 * report.se, rel=1e-9)


def test_perfect_imputation_gives_true_effects():
    rng = np.random.default_rng(4)
    c = rng.standard_normal(10)
    t_po = c + rng.standard_normal(10)
    assign = np.array([1, 0] * 5)
    e = Experiment(np.where(assign == 1, t_po, c), assign, np.zeros((10, 0)), 0.5)
    report = loop_estimate(e, ConstantImputer(t_po, c).impute(e))
    assert np.allclose(report.tau_units, t_po - c, atol=1e-12)


def test_loop_requires_two_per_arm():
    e = Experiment(np.arange(4.0), np.array([1, 0, 0, 0]), np.zeros((4, 0)), 0.5)
    with pytest.raises(InsufficientArm):
        loop_estimate(e, ConstantImputer().impute(e))


def test_nonconstant_p_blocks_variance_only():
    e = Experiment(np.arange(6.0), np.array([1, 1, 0, 0, 1, 0]), np.zeros((6, 0)),
                   np.array([0.3, 0.5, 0.5, 0.5, 0.5, 0.5]))
    imputed = MeanImputer().impute(e)
    with pytest.raises(NonConstantP):
        loop_estimate(e, imputed)
    report = loop_estimate(e, imputed, variance=False)
    assert report.var_hat is None and math.isfinite(report.tau_hat)


def test_experiment_validation():
    with pytest.raises(DomainError):
        Experiment(np.ones(3), np.array([1, 2, 0]), np.zeros((3, 0)), 0.5)
    with pytest.raises(DomainError):
        Experiment(np.ones(3), np.array([1, 0, 0]), np.zeros((3, 0)), 1.0)
    with pytest.raises(DomainError):
        Experiment(np.ones(3), np.array([1, 0, 0]), np.zeros((4, 0)), 0.5)
    with pytest.raises(DomainError):
        Experiment(np.ones(4), np.array([1, 0, 0, 0]), np.zeros((4, 0)), 0.5,
                   CompleteRandomization(2))


def test_experiment_arrays_are_frozen(five_unit):
    with pytest.raises(ValueError):
        five_unit.y[0] = 10


def test_designs_accept_matching_assignments():
    t = np.array([1, 0, 1, 0])
    Experiment(np.ones(4), t, np.zeros((4, 0)), 0.5, CompleteRandomization(2))
    Experiment(np.ones(4), t, np.zeros((4, 0)), 0.5, Blocked(np.array([0, 0, 1, 1])))
    paired = Paired(np.array([0, 0, 1, 1]))
    Experiment(np.ones(4), t, np.zeros((4, 0)), 0.5, paired)
    assert paired.partner(2) == 3 and paired.partner(1) == 0
    assert Bernoulli().kind == "bernoulli"


def test_imputed_outcomes_combine():
    e = Experiment(np.ones(4), np.array([1, 0, 1, 0]), np.zeros((4, 0)), 0.25)
    out = ImputedOutcomes.from_arms(e, np.full(4, 10.0), np.zeros(4), "x")
    assert np.allclose(out.m_hat, 7.5)
