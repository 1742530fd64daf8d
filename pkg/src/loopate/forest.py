"""Regression random forest with in-bag bookkeeping and out-of-bag prediction.

Trees are plain variance-reduction CART trees grown on bootstrap samples of
size ``n - 1``. Each tree draws its randomness from its own splitmix64 stream
keyed by ``(seed, tree index)``, so the fitted forest does not depend on how
trees are distributed over threads.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional

import numba
import numpy as np

from .errors import DomainError, NoOobTrees

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_S30 = np.uint64(30)
_S27 = np.uint64(27)
_S31 = np.uint64(31)
_S11 = np.uint64(11)
_INV53 = 1.0 / 9007199254740992.0


@dataclass(frozen=True)
class ForestParams:
    n_trees: int = 500
    min_node_size: int = 5
    mtry: Optional[int] = None  # None -> max(1, q // 3)
    max_depth: Optional[int] = None
    seed: int = 0

    def __post_init__(self):
        if self.n_trees < 1:
            raise DomainError("n_trees must be >= 1")
        if self.min_node_size < 1:
            raise DomainError("min_node_size must be >= 1")
        if self.mtry is not None and self.mtry < 1:
            raise DomainError("mtry must be >= 1")
        if self.max_depth is not None and self.max_depth < 0:
            raise DomainError("max_depth must be >= 0")

    def resolved_mtry(self, q: int) -> int:
        mtry = max(1, q // 3) if self.mtry is None else self.mtry
        if mtry > q:
            raise DomainError(f"mtry={mtry} exceeds the number of features q={q}")
        return mtry


@dataclass(frozen=True)
class Tree:
    """One fitted tree; ``feature == -1`` marks a leaf."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray

    def predict(self, x_row) -> float:
        node = 0
        x_row = np.asarray(x_row, dtype=float)
        while self.feature[node] >= 0:
            if x_row[self.feature[node]] <= self.threshold[node]:
                node = self.left[node]
            else:
                node = self.right[node]
        return float(self.value[node])


@dataclass(frozen=True, eq=False)
class Forest:
    # padded node tables, one row per tree
    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    n_nodes: np.ndarray
    inbag: np.ndarray  # (n_trees, training_n) bootstrap counts
    params: ForestParams
    training_n: int
    x_train: np.ndarray
    y_train: np.ndarray

    @property
    def n_trees(self) -> int:
        return len(self.n_nodes)

    def tree(self, k: int) -> Tree:
        m = self.n_nodes[k]
        return Tree(
            self.feature[k, :m].copy(),
            self.threshold[k, :m].copy(),
            self.left[k, :m].copy(),
            self.right[k, :m].copy(),
            self.value[k, :m].copy(),
        )

    def oob_trees(self, i: int) -> np.ndarray:
        return np.flatnonzero(self.inbag[:, i] == 0)


# ---------------------------------------------------------------------------
# numba kernels
# ---------------------------------------------------------------------------


@numba.njit(cache=True, inline="always")
def _mix64(z):
    z = (z ^ (z >> _S30)) * _MIX1
    z = (z ^ (z >> _S27)) * _MIX2
    return z ^ (z >> _S31)


@numba.njit(cache=True, inline="always")
def _next_uniform(state):
    state[0] = state[0] + _GOLDEN
    return np.float64(_mix64(state[0]) >> _S11) * _INV53


@numba.njit(cache=True, inline="always")
def _next_index(state, m):
    k = np.int64(_next_uniform(state) * m)
    if k >= m:
        k = m - 1
    return k


@numba.njit(cache=True)
def _grow_tree(x, y, idx, state, mtry, min_node_size, max_depth,
               feature, threshold, left, right, value):
    n_boot = idx.shape[0]
    q = x.shape[1]
    perm = np.arange(q)
    buf = np.empty(n_boot, dtype=np.int64)
    vals = np.empty(n_boot)

    stack_node = np.empty(n_boot * 2 + 2, dtype=np.int64)
    stack_start = np.empty(n_boot * 2 + 2, dtype=np.int64)
    stack_end = np.empty(n_boot * 2 + 2, dtype=np.int64)
    stack_depth = np.empty(n_boot * 2 + 2, dtype=np.int64)
    top = 0
    stack_node[0] = 0
    stack_start[0] = 0
    stack_end[0] = n_boot
    stack_depth[0] = 0
    top = 1
    n_nodes = 1

    while top > 0:
        top -= 1
        node = stack_node[top]
        start = stack_start[top]
        end = stack_end[top]
        depth = stack_depth[top]
        size = end - start

        total = 0.0
        y_min = np.inf
        y_max = -np.inf
        for k in range(start, end):
            yk = y[idx[k]]
            total += yk
            if yk < y_min:
                y_min = yk
            if yk > y_max:
                y_max = yk
        value[node] = total / size
        feature[node] = -1
        threshold[node] = 0.0
        left[node] = -1
        right[node] = -1

        if size <= min_node_size or y_min == y_max or (max_depth >= 0 and depth >= max_depth):
            continue

        # sample mtry candidate features without replacement (partial Fisher-Yates)
        for j in range(mtry):
            r = j + _next_index(state, q - j)
            tmp = perm[j]
            perm[j] = perm[r]
            perm[r] = tmp

        best_crit = -np.inf
        best_f = -1
        best_thr = 0.0
        for j in range(mtry):
            f = perm[j]
            for k in range(size):
                vals[k] = x[idx[start + k], f]
            order = np.argsort(vals[:size], kind="mergesort")
            s_left = 0.0
            for k in range(size - 1):
                a = vals[order[k]]
                s_left += y[idx[start + order[k]]]
                b = vals[order[k + 1]]
                if a < b:
                    n_left = k + 1
                    n_right = size - n_left
                    s_right = total - s_left
                    crit = s_left * s_left / n_left + s_right * s_right / n_right
                    thr = 0.5 * (a + b)
                    if thr >= b:
                        thr = a
                    if crit > best_crit or (
                        crit == best_crit
                        and (f < best_f or (f == best_f and thr < best_thr))
                    ):
                        best_crit = crit
                        best_f = f
                        best_thr = thr
        if best_f < 0:
            continue

        # stable partition of idx[start:end] on x <= threshold
        n_left = 0
        for k in range(start, end):
            if x[idx[k], best_f] <= best_thr:
                buf[n_left] = idx[k]
                n_left += 1
        pos = n_left
        for k in range(start, end):
            if x[idx[k], best_f] > best_thr:
                buf[pos] = idx[k]
                pos += 1
        for k in range(size):
            idx[start + k] = buf[k]

        feature[node] = best_f
        threshold[node] = best_thr
        lnode = n_nodes
        rnode = n_nodes + 1
        n_nodes += 2
        left[node] = lnode
        right[node] = rnode
        # right pushed first so the left subtree is grown first
        stack_node[top] = rnode
        stack_start[top] = start + n_left
        stack_end[top] = end
        stack_depth[top] = depth + 1
        top += 1
        stack_node[top] = lnode
        stack_start[top] = start
        stack_end[top] = start + n_left
        stack_depth[top] = depth + 1
        top += 1
    return n_nodes


@numba.njit(cache=True, nogil=True)
def _grow_trees(x, y, n_boot, first_tree, seed, mtry, min_node_size, max_depth,
                feature, threshold, left, right, value, n_nodes, inbag):
    n = x.shape[0]
    state = np.empty(1, dtype=np.uint64)
    idx = np.empty(n_boot, dtype=np.int64)
    for t in range(feature.shape[0]):
        state[0] = _mix64(seed ^ _mix64(np.uint64(first_tree + t) + _GOLDEN))
        for k in range(n_boot):
            j = _next_index(state, n)
            idx[k] = j
            inbag[t, j] += 1
        n_nodes[t] = _grow_tree(x, y, idx, state, mtry, min_node_size, max_depth,
                                feature[t], threshold[t], left[t], right[t], value[t])


@numba.njit(cache=True, nogil=True)
def _tree_predictions(feature, threshold, left, right, value, xq):
    n_trees = feature.shape[0]
    n_rows = xq.shape[0]
    out = np.empty((n_trees, n_rows))
    for t in range(n_trees):
        for r in range(n_rows):
            node = 0
            while feature[t, node] >= 0:
                if xq[r, feature[t, node]] <= threshold[t, node]:
                    node = left[t, node]
                else:
                    node = right[t, node]
            out[t, r] = value[t, node]
    return out


# ---------------------------------------------------------------------------
# public API
# ---------------------------------------------------------------------------


def _seed_u64(seed: int) -> np.uint64:
    return np.uint64(int(seed) & 0xFFFFFFFFFFFFFFFF)


def fit_forest(x, y, params: ForestParams = ForestParams(), n_jobs: int = 1) -> Forest:
    """Grow ``params.n_trees`` trees, each on ``n - 1`` draws with replacement."""
    x = np.ascontiguousarray(np.asarray(x, dtype=float))
    y = np.ascontiguousarray(np.asarray(y, dtype=float))
    if x.ndim == 1:
        x = x.reshape(-1, 1)
    n, q = x.shape
    if n < 2:
        raise DomainError("need at least two training units")
    if q < 1:
        raise DomainError("need at least one feature")
    if y.shape != (n,):
        raise DomainError("y must have one entry per row of x")
    mtry = params.resolved_mtry(q)
    n_boot = n - 1
    max_nodes = 2 * n_boot + 1
    n_trees = params.n_trees
    max_depth = -1 if params.max_depth is None else params.max_depth

    # padding beyond n_nodes stays at these fill values
    feature = np.full((n_trees, max_nodes), -1, dtype=np.int64)
    threshold = np.zeros((n_trees, max_nodes))
    left = np.full((n_trees, max_nodes), -1, dtype=np.int64)
    right = np.full((n_trees, max_nodes), -1, dtype=np.int64)
    value = np.zeros((n_trees, max_nodes))
    n_nodes = np.zeros(n_trees, dtype=np.int64)
    inbag = np.zeros((n_trees, n), dtype=np.int32)
    seed = _seed_u64(params.seed)

    def work(lo, hi):
        _grow_trees(x, y, n_boot, lo, seed, mtry, params.min_node_size, max_depth,
                    feature[lo:hi], threshold[lo:hi], left[lo:hi], right[lo:hi],
                    value[lo:hi], n_nodes[lo:hi], inbag[lo:hi])

    n_jobs = max(1, min(int(n_jobs), n_trees))
    if n_jobs == 1:
        work(0, n_trees)
    else:
        bounds = np.linspace(0, n_trees, n_jobs + 1).astype(int)
        with ThreadPoolExecutor(max_workers=n_jobs) as pool:
            list(pool.map(work, bounds[:-1], bounds[1:]))

    for a in (feature, threshold, left, right, value, n_nodes, inbag):
        a.setflags(write=False)
    return Forest(feature, threshold, left, right, value, n_nodes, inbag,
                  params, n, x, y)


def tree_predictions(forest: Forest, x) -> np.ndarray:
    """Per-tree predictions, shape ``(n_trees, n_rows)``."""
    xq = np.ascontiguousarray(np.atleast_2d(np.asarray(x, dtype=float)))
    if xq.shape[1] != forest.x_train.shape[1]:
        raise DomainError("feature count does not match the training data")
    return _tree_predictions(forest.feature, forest.threshold, forest.left,
                             forest.right, forest.value, xq)


def predict_many(forest: Forest, x) -> np.ndarray:
    return tree_predictions(forest, x).mean(axis=0)


def predict(forest: Forest, x_row) -> float:
    return float(predict_many(forest, np.asarray(x_row, dtype=float).reshape(1, -1))[0])


def predict_oob(forest: Forest, i: int) -> float:
    trees = forest.oob_trees(i)
    if len(trees) == 0:
        raise NoOobTrees(i)
    preds = tree_predictions(forest, forest.x_train[i : i + 1])[:, 0]
    return float(preds[trees].mean())


def oob_predictions(forest: Forest) -> np.ndarray:
    """Out-of-bag prediction for every training unit."""
    preds = tree_predictions(forest, forest.x_train)
    oob = forest.inbag == 0
    counts = oob.sum(axis=0)
    missing = np.flatnonzero(counts == 0)
    if len(missing):
        raise NoOobTrees(int(missing[0]))
    return np.where(oob, preds, 0.0).sum(axis=0) / counts


def dump_forest(forest: Forest) -> str:
    """Human-readable listing of every tree, for debugging."""
    lines = [f"forest n_trees={forest.n_trees} training_n={forest.training_n} {forest.params}"]
    for k in range(forest.n_trees):
        tree = forest.tree(k)
        lines.append(f"tree {k}")
        for node in range(len(tree.feature)):
            if tree.feature[node] < 0:
                lines.append(f"  {node}: leaf value={tree.value[node]!r}")
            else:
                lines.append(
                    f"  {node}: x[{tree.feature[node]}] <= {tree.threshold[node]!r} "
                    f"-> {tree.left[node]}, {tree.right[node]}"
                )
    return "\n".join(lines)
