import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from loopate.errors import DomainError, NoOobTrees
from loopate.forest import (ForestParams, dump_forest, fit_forest, oob_predictions, predict,
                            predict_many, predict_oob, tree_predictions)


def _data(seed, n=60, q=3):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n, q))
    y = x[:, 0] * 2 + np.sin(x[:, 1]) + 0.1 * rng.standard_normal(n)
    return x, y


def _leaf_of(tree, x_row):
    node = 0
    while tree.feature[node] >= 0:
        node = tree.left[node] if x_row[tree.feature[node]] <= tree.threshold[node] else tree.right[node]
    return node


def test_params_validation():
    with pytest.raises(DomainError):
        ForestParams(n_trees=0)
    with pytest.raises(DomainError):
        ForestParams(min_node_size=0)
    with pytest.raises(DomainError):
        ForestParams(mtry=5).resolved_mtry(3)
    assert ForestParams().resolved_mtry(50) == 16
    assert ForestParams().resolved_mtry(2) == 1


def test_constant_response():
    x, _ = _data(0)
    forest = fit_forest(x, np.full(60, 3.25), ForestParams(n_trees=20))
    assert np.all(predict_many(forest, np.random.default_rng(1).standard_normal((10, 3))) == 3.25)


def test_single_stump_predicts_bootstrap_mean():
    x, y = _data(1, n=20)
    forest = fit_forest(x, y, ForestParams(n_trees=1, min_node_size=20))
    assert forest.n_nodes[0] == 1
    boot_mean = (forest.inbag[0] * y).sum() / forest.inbag[0].sum()
    assert predict(forest, x[0]) == pytest.approx(boot_mean, rel=1e-12)


def test_binary_feature_separation():
    rng = np.random.default_rng(2)
    x = (rng.random((100, 1)) < 0.5).astype(float)
    y = 10 * x[:, 0]
    forest = fit_forest(x, y, ForestParams(n_trees=100, seed=3))
    assert abs(predict(forest, [0.0]) - 0) < 0.5
    assert abs(predict(forest, [1.0]) - 10) < 0.5


def test_bootstrap_size_is_n_minus_one():
    x, y = _data(3, n=40)
    forest = fit_forest(x, y, ForestParams(n_trees=50))
    assert np.all(forest.inbag.sum(axis=1) == 39)


def test_predict_is_mean_of_tree_predictions():
    x, y = _data(4)
    forest = fit_forest(x, y, ForestParams(n_trees=25, seed=11))
    row = x[7] + 0.05
    per_tree = [forest.tree(k).predict(row) for k in range(forest.n_trees)]
    assert predict(forest, row) == pytest.approx(np.mean(per_tree), rel=1e-12)
    assert np.allclose(tree_predictions(forest, row[None, :])[:, 0], per_tree, rtol=0, atol=0)


def test_oob_single_tree():
    x, y = _data(5, n=15)
    for seed in range(50):
        forest = fit_forest(x, y, ForestParams(n_trees=1, seed=seed))
        out = np.flatnonzero(forest.inbag[0] == 0)
        inb = np.flatnonzero(forest.inbag[0] > 0)
        if len(out):
            i = int(out[0])
            assert predict_oob(forest, i) == forest.tree(0).predict(x[i])
        with pytest.raises(NoOobTrees) as info:
            predict_oob(forest, int(inb[0]))
        assert info.value.index == int(inb[0])
        with pytest.raises(NoOobTrees):
            oob_predictions(forest)


def test_oob_fraction_near_inverse_e():
    x, y = _data(6, n=100)
    forest = fit_forest(x, y, ForestParams(n_trees=500, seed=2))
    frac = (forest.inbag == 0).mean()
    assert abs(frac - (1 - 1 / 100) ** 99) < 0.05
    assert abs(frac - np.exp(-1)) < 0.05


def test_oob_predictions_use_only_excluding_trees():
    x, y = _data(7, n=30)
    forest = fit_forest(x, y, ForestParams(n_trees=200, seed=4))
    preds = oob_predictions(forest)
    for i in range(30):
        trees = forest.oob_trees(i)
        assert np.all(forest.inbag[trees, i] == 0)
        manual = np.mean([forest.tree(k).predict(x[i]) for k in trees])
        assert preds[i] == pytest.approx(manual, rel=1e-12)
        assert predict_oob(forest, i) == pytest.approx(manual, rel=1e-12)


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 2**63 - 1), min_node=st.integers(1, 8),
       depth=st.one_of(st.none(), st.integers(0, 4)))
def test_tree_structure_invariants(seed, min_node, depth):
    x, y = _data(seed % 1000, n=40)
    x[:, 2] = np.round(x[:, 2])  # ties in one feature
    forest = fit_forest(x, y, ForestParams(n_trees=5, min_node_size=min_node, max_depth=depth,
                                           seed=seed))
    for k in range(forest.n_trees):
        tree = forest.tree(k)
        members = {}
        for i in np.flatnonzero(forest.inbag[k]):
            members.setdefault(_leaf_of(tree, x[i]), []).extend([y[i]] * forest.inbag[k, i])
        for leaf, ys in members.items():
            assert tree.value[leaf] == pytest.approx(np.mean(ys), rel=1e-9, abs=1e-12)
        bag = np.repeat(np.arange(40), forest.inbag[k])
        assert bag.size == 39
        for node in np.flatnonzero(tree.feature >= 0):
            # samples reaching this node
            reach = [i for i in bag if _passes(tree, x[i], node)]
            yy = y[reach]
            go_left = x[reach, tree.feature[node]] <= tree.threshold[node]
            parent = ((yy - yy.mean()) ** 2).sum()
            child = sum(((yy[m] - yy[m].mean()) ** 2).sum() for m in (go_left, ~go_left))
            assert go_left.any() and (~go_left).any()
            assert child <= parent + 1e-9
            assert len(reach) > min_node
        preds = predict_many(forest, x)
        assert preds.min() >= y.min() - 1e-12 and preds.max() <= y.max() + 1e-12
        if depth is not None:
            assert _depth(tree) <= depth


def _passes(tree, x_row, target):
    node = 0
    while True:
        if node == target:
            return True
        if tree.feature[node] < 0:
            return False
        node = tree.left[node] if x_row[tree.feature[node]] <= tree.threshold[node] else tree.right[node]


def _depth(tree, node=0):
    if tree.feature[node] < 0:
        return 0
    return 1 + max(_depth(tree, tree.left[node]), _depth(tree, tree.right[node]))


def test_thresholds_are_midpoints():
    x = np.array([[0.0], [1.0], [2.0], [3.0], [4.0], [5.0]] * 4)
    y = np.where(x[:, 0] < 2.5, 0.0, 1.0)
    forest = fit_forest(x, y, ForestParams(n_trees=10, min_node_size=1, seed=8))
    for k in range(10):
        present = np.unique(x[forest.inbag[k] > 0, 0])
        mids = (present[:-1] + present[1:]) / 2
        # the clean split between 2 and 3 falls at the midpoint of the nearest values in the bag
        lo, hi = present[present < 2.5].max(), present[present > 2.5].min()
        assert forest.tree(k).threshold[0] == (lo + hi) / 2
        assert forest.tree(k).threshold[0] in mids


def test_thread_count_does_not_change_forest():
    x, y = _data(9, n=80, q=6)
    params = ForestParams(n_trees=64, seed=123)
    ref = fit_forest(x, y, params, n_jobs=1)
    for jobs in (2, 8):
        other = fit_forest(x, y, params, n_jobs=jobs)
        for name in ("feature", "threshold", "left", "right", "value", "n_nodes", "inbag"):
            assert np.array_equal(getattr(ref, name), getattr(other, name))
    assert dump_forest(ref) == dump_forest(fit_forest(x, y, params, n_jobs=3))


def test_tree_streams_do_not_depend_on_tree_count():
    x, y = _data(10)
    small = fit_forest(x, y, ForestParams(n_trees=5, seed=42))
    big = fit_forest(x, y, ForestParams(n_trees=50, seed=42))
    assert np.array_equal(small.inbag, big.inbag[:5])
    assert dump_forest(small).split("\n")[1:] == dump_forest(
        fit_forest(x, y, ForestParams(n_trees=5, seed=42))).split("\n")[1:]


def test_different_seeds_differ():
    x, y = _data(11)
    a = fit_forest(x, y, ForestParams(n_trees=5, seed=1))
    b = fit_forest(x, y, ForestParams(n_trees=5, seed=2))
    assert not np.array_equal(a.inbag, b.inbag)
