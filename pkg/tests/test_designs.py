from collections import Counter
from fractions import Fraction

import numpy as np
import pytest

from loopate.core import (Blocked, CompleteRandomization, Experiment, Paired, loop_estimate)
from loopate.designs import (drop_arrangement_distribution, drop_pool, expected_drop_imputation,
                             loop_with_random_drop, random_drop_plan)
from loopate.errors import DomainError, EmptyOppositeArm, UnsupportedImputer
from loopate.imputers import MeanImputer, OlsImputer, StrataImputer, impute_mean, impute_strata

from conftest import random_experiment


def _complete(rng, n_units, n_treated, q=0):
    t = np.zeros(n_units, dtype=np.int8)
    t[rng.choice(n_units, n_treated, replace=False)] = 1
    return Experiment(rng.standard_normal(n_units) + t, t, rng.standard_normal((n_units, q)),
                      n_treated / n_units, CompleteRandomization(n_treated))


def test_plan_control_unit_drops_one_treated():
    # C T T C C, unit 1 in one-based numbering is index 0
    t = np.array([0, 1, 1, 0, 0])
    exp = Experiment(np.arange(5.0), t, np.zeros((5, 0)), 0.4, CompleteRandomization(2))
    seen = Counter(random_drop_plan(exp, 0, seed=3, rep=r).dropped for r in range(4000))
    assert set(seen) == {frozenset({0, 1}), frozenset({0, 2})}
    assert abs(seen[frozenset({0, 1})] / 4000 - 0.5) < 0.03


def test_plan_paired_and_bernoulli():
    exp = Experiment(np.arange(6.0), np.array([1, 0, 0, 1, 1, 0]), np.zeros((6, 0)), 0.5,
                     Paired(np.array([0, 0, 1, 1, 2, 2])))
    assert random_drop_plan(exp, 3, seed=0).dropped == frozenset({2, 3})
    bern = Experiment(np.arange(6.0), np.array([1, 0, 0, 1, 1, 0]), np.zeros((6, 0)), 0.5)
    assert random_drop_plan(bern, 3, seed=0).dropped == frozenset({3})
    assert drop_pool(bern, 3) is None


def test_plan_blocked_stays_in_block():
    blocks = np.array([0, 0, 0, 0, 1, 1, 1, 1])
    t = np.array([1, 0, 1, 0, 1, 1, 0, 0])
    exp = Experiment(np.arange(8.0), t, np.zeros((8, 0)), 0.5, Blocked(blocks))
    for r in range(50):
        (k,) = random_drop_plan(exp, 4, seed=1, rep=r).dropped - {4}
        assert blocks[k] == 1 and t[k] == 0


def test_empty_opposite_block():
    blocks = np.array([0, 0, 1, 1, 1, 1])
    t = np.array([1, 1, 1, 0, 1, 0])
    # blocks without both arms are rejected when the experiment is built
    with pytest.raises(DomainError, match="block 0"):
        Experiment(np.arange(6.0), t, np.zeros((6, 0)), 0.5, Blocked(blocks))
    assert issubclass(EmptyOppositeArm, ValueError)


def test_plan_reproducible():
    rng = np.random.default_rng(0)
    exp = _complete(rng, 12, 6)
    a = [random_drop_plan(exp, i, seed=9, rep=2) for i in range(12)]
    b = [random_drop_plan(exp, i, seed=9, rep=2) for i in range(12)]
    assert a == b


def test_arrangement_distribution_uniform():
    dist = drop_arrangement_distribution(5, 2)
    assert len(dist) == 12
    for arrangement, probs in dist.items():
        assert probs[0] == probs[1] == Fraction(1, 12)
        assert arrangement.count("\\") == 1


def test_expectation_mode_mean_equals_no_drop():
    rng = np.random.default_rng(1)
    for _ in range(30):
        n_units = int(rng.integers(6, 25))
        exp = _complete(rng, n_units, int(rng.integers(2, n_units - 1)))
        a = expected_drop_imputation(exp, MeanImputer())
        b = impute_mean(exp)
        assert np.allclose(a.m_hat, b.m_hat, rtol=0, atol=1e-12)


def test_expectation_mode_strata_is_post_stratified():
    rng = np.random.default_rng(2)
    labels = np.repeat([0, 1], 8)
    t = np.array([1, 1, 1, 0, 0, 0, 1, 0] * 2, dtype=np.int8)
    exp = Experiment(rng.standard_normal(16) + t, t, np.zeros((16, 0)), 0.5,
                     Blocked(labels))
    rep = loop_with_random_drop(exp, StrataImputer(labels), mode="expectation")
    direct = loop_estimate(exp, impute_strata(exp, labels)).tau_hat
    assert rep.tau_hat == pytest.approx(direct, rel=1e-12)
    assert rep.drop_mc_se == 0.0
    assert "variance_bound_assumes_independent_assignment" in rep.caveats


def test_sampled_converges_to_expectation():
    rng = np.random.default_rng(3)
    exp = _complete(rng, 14, 7)
    exact = loop_with_random_drop(exp, MeanImputer(), mode="expectation").tau_hat
    sampled = loop_with_random_drop(exp, MeanImputer(), reps=2000, seed=4)
    assert abs(sampled.tau_hat - exact) <= 3 * sampled.drop_mc_se + 1e-12


def test_expectation_mode_rejects_other_imputers():
    rng = np.random.default_rng(4)
    exp = _complete(rng, 10, 5, q=1)
    with pytest.raises(UnsupportedImputer):
        loop_with_random_drop(exp, OlsImputer(), mode="expectation")
    rep = loop_with_random_drop(exp, OlsImputer(), reps=3, seed=1)
    assert np.isfinite(rep.tau_hat)


def test_bernoulli_pass_through():
    rng = np.random.default_rng(5)
    exp = random_experiment(rng, 12)
    rep = loop_with_random_drop(exp, MeanImputer(), reps=2)
    assert rep.tau_hat == pytest.approx(loop_estimate(exp, impute_mean(exp)).tau_hat, rel=1e-12)
    assert "variance_bound_assumes_independent_assignment" not in rep.caveats
