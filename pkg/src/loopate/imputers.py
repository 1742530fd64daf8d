"""Leave-one-out imputation of potential outcomes.

Every imputer supports two operations:

``impute(exp)``
    For each unit ``i``, predict ``(t_i, c_i)`` from the other ``N - 1`` units.
``fit_predict(exp, keep, rows)``
    Fit on the units flagged in ``keep`` and predict ``(t, c)`` for ``rows``.
    Random drop and the pairwise covariance estimator are built on this.

Arm-separated imputers (mean, strata, forest) predict treated outcomes from
treated units only and control outcomes from control units only.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np

from .core import Experiment, ImputedOutcomes
from .errors import DomainError, InsufficientArm, NoOobTrees, RankDeficient, StratumTooSmall
from .forest import ForestParams, fit_forest, oob_predictions, predict_many

# arm seeds for the two forests; shared by every refit of the same arm
_TREATED_STREAM = 0x7F4A7C15
_CONTROL_STREAM = 0x1CE4E5B9


def _arm_mean(total, count, fallback, what="arm"):
    """Elementwise ``total / count`` with ``fallback`` where ``count == 0``."""
    total = np.asarray(total, dtype=float)
    count = np.asarray(count)
    empty = count == 0
    if np.any(empty):
        if fallback is None:
            raise InsufficientArm(f"leave-one-out {what} mean is undefined: arm is empty")
        out = np.full(total.shape, float(fallback))
        np.divide(total, count, out=out, where=~empty)
        return out
    return total / count


@dataclass(frozen=True)
class MeanImputer:
    """Arm means of the other units, ignoring covariates.

    ``fallback`` is used when an arm has no other units; without it such
    assignments raise :class:`InsufficientArm`.
    """

    fallback: Optional[float] = None

    @property
    def id(self) -> str:
        return "mean" if self.fallback is None else f"mean(fallback={self.fallback!r})"

    def impute(self, exp: Experiment) -> ImputedOutcomes:
        t = exp.t
        y = exp.y
        if self.fallback is None and (exp.n_treated < 2 or exp.n_control < 2):
            raise InsufficientArm(
                f"mean imputation needs 2 treated and 2 control units, got "
                f"{exp.n_treated} and {exp.n_control}"
            )
        s_t = y[t == 1].sum()
        s_c = y[t == 0].sum()
        t_hat = _arm_mean(s_t - y * (t == 1), exp.n_treated - (t == 1), self.fallback)
        c_hat = _arm_mean(s_c - y * (t == 0), exp.n_control - (t == 0), self.fallback)
        return ImputedOutcomes.from_arms(exp, t_hat, c_hat, self.id)

    def fit_predict(self, exp, keep, rows):
        keep = np.asarray(keep, dtype=bool)
        tr = keep & (exp.t == 1)
        co = keep & (exp.t == 0)
        rows = np.atleast_1d(rows)
        t_val = _arm_mean(exp.y[tr].sum(), tr.sum(), self.fallback)
        c_val = _arm_mean(exp.y[co].sum(), co.sum(), self.fallback)
        return np.full(len(rows), float(t_val)), np.full(len(rows), float(c_val))


@dataclass(frozen=True, eq=False)
class StrataImputer:
    """Leave-one-out arm means within each stratum (post-stratification)."""

    labels: np.ndarray
    fallback: Optional[float] = None

    def __post_init__(self):
        object.__setattr__(self, "labels", np.asarray(self.labels))

    @property
    def id(self) -> str:
        return "strata" if self.fallback is None else f"strata(fallback={self.fallback!r})"

    def _codes(self, exp):
        if len(self.labels) != exp.n_units:
            raise DomainError("stratum labels must have one entry per unit")
        uniq, codes = np.unique(self.labels, return_inverse=True)
        return uniq, codes

    def impute(self, exp: Experiment) -> ImputedOutcomes:
        uniq, codes = self._codes(exp)
        k = len(uniq)
        t = exp.t
        y = exp.y
        n_t = np.bincount(codes, weights=(t == 1), minlength=k)
        n_c = np.bincount(codes, weights=(t == 0), minlength=k)
        if self.fallback is None:
            for s in range(k):
                if n_t[s] < 2 or n_c[s] < 2:
                    raise StratumTooSmall(uniq[s].item(), int(n_t[s]), int(n_c[s]))
        s_t = np.bincount(codes, weights=y * (t == 1), minlength=k)
        s_c = np.bincount(codes, weights=y * (t == 0), minlength=k)
        t_hat = _arm_mean(s_t[codes] - y * (t == 1), n_t[codes] - (t == 1), self.fallback, "stratum")
        c_hat = _arm_mean(s_c[codes] - y * (t == 0), n_c[codes] - (t == 0), self.fallback, "stratum")
        return ImputedOutcomes.from_arms(exp, t_hat, c_hat, self.id)

    def fit_predict(self, exp, keep, rows):
        uniq, codes = self._codes(exp)
        k = len(uniq)
        keep = np.asarray(keep, dtype=bool)
        tr = keep & (exp.t == 1)
        co = keep & (exp.t == 0)
        rows = np.atleast_1d(rows)
        n_t = np.bincount(codes, weights=tr, minlength=k)[codes[rows]]
        n_c = np.bincount(codes, weights=co, minlength=k)[codes[rows]]
        s_t = np.bincount(codes, weights=exp.y * tr, minlength=k)[codes[rows]]
        s_c = np.bincount(codes, weights=exp.y * co, minlength=k)[codes[rows]]
        return (_arm_mean(s_t, n_t, self.fallback, "stratum"),
                _arm_mean(s_c, n_c, self.fallback, "stratum"))


@dataclass(frozen=True)
class OlsImputer:
    """Least squares of Y on ``[1, T, Z]`` fitted without the unit being imputed.

    Singular fits use the minimum-norm solution and add a caveat unless
    ``allow_fallback`` is false, in which case :class:`RankDeficient` is raised.
    """

    include_intercept: bool = True
    allow_fallback: bool = True

    @property
    def id(self) -> str:
        return "ols" if self.include_intercept else "ols(no_intercept)"

    def _design(self, t, z):
        cols = [t.reshape(-1, 1).astype(float), z]
        if self.include_intercept:
            cols.insert(0, np.ones((len(t), 1)))
        return np.hstack(cols)

    def _fit(self, x, y):
        beta, _, rank, _ = np.linalg.lstsq(x, y, rcond=None)
        deficient = rank < x.shape[1]
        if deficient and not self.allow_fallback:
            raise RankDeficient(f"design matrix has rank {rank} < {x.shape[1]} columns")
        return beta, deficient

    def _predict(self, beta, z_rows):
        ones = np.ones(len(z_rows))
        x1 = self._design(ones, z_rows)
        x0 = self._design(0 * ones, z_rows)
        return x1 @ beta, x0 @ beta

    def impute(self, exp: Experiment) -> ImputedOutcomes:
        x = self._design(exp.t, exp.z)
        n_units = exp.n_units
        t_hat = np.empty(n_units)
        c_hat = np.empty(n_units)
        deficient_units = []
        mask = np.ones(n_units, dtype=bool)
        for i in range(n_units):
            mask[i] = False
            beta, deficient = self._fit(x[mask], exp.y[mask])
            mask[i] = True
            if deficient:
                deficient_units.append(i)
            th, ch = self._predict(beta, exp.z[i : i + 1])
            t_hat[i] = th[0]
            c_hat[i] = ch[0]
        caveats = ()
        if deficient_units:
            caveats = (f"ols_min_norm_fallback:{len(deficient_units)}_units",)
        return ImputedOutcomes.from_arms(exp, t_hat, c_hat, self.id, caveats)

    def fit_predict(self, exp, keep, rows):
        keep = np.asarray(keep, dtype=bool)
        rows = np.atleast_1d(rows)
        x = self._design(exp.t[keep], exp.z[keep])
        beta, _ = self._fit(x, exp.y[keep])
        return self._predict(beta, exp.z[rows])


def _arm_seed(seed: int, stream: int) -> int:
    return (int(seed) * 0x9E3779B97F4A7C15 + stream) & 0xFFFFFFFFFFFFFFFF


@dataclass(frozen=True)
class ForestImputer:
    """Two arm-specific random forests.

    The same-arm outcome comes from the out-of-bag prediction (``mode="oob"``)
    or from a forest refit without the unit (``mode="exact_loo"``); the
    opposite-arm outcome is the ordinary prediction of the other arm's forest.
    Arms with fewer than two units predict their mean, or ``fallback`` if empty.
    """

    params: ForestParams = field(default_factory=ForestParams)
    mode: str = "oob"
    fallback: Optional[float] = None
    n_jobs: int = 1

    def __post_init__(self):
        if self.mode not in ("oob", "exact_loo"):
            raise DomainError(f"unknown forest mode {self.mode!r}")

    @property
    def id(self) -> str:
        p = self.params
        return (f"forest(mode={self.mode},n_trees={p.n_trees},min_node_size={p.min_node_size},"
                f"mtry={p.mtry},max_depth={p.max_depth},seed={p.seed})")

    def _arm_params(self, arm: int) -> ForestParams:
        stream = _TREATED_STREAM if arm == 1 else _CONTROL_STREAM
        p = self.params
        return ForestParams(p.n_trees, p.min_node_size, p.mtry, p.max_depth,
                            _arm_seed(p.seed, stream))

    def _small_arm(self, y_arm, n_rows):
        if len(y_arm) == 0:
            if self.fallback is None:
                raise InsufficientArm("forest imputation: arm is empty")
            return np.full(n_rows, float(self.fallback))
        return np.full(n_rows, float(y_arm.mean()))

    def _fit_arm_predict(self, z_arm, y_arm, arm, z_rows):
        if len(y_arm) < 2:
            return self._small_arm(y_arm, len(z_rows))
        forest = fit_forest(z_arm, y_arm, self._arm_params(arm), n_jobs=self.n_jobs)
        return predict_many(forest, z_rows)

    def _mean_delegate(self):
        return MeanImputer(self.fallback)

    def impute(self, exp: Experiment) -> ImputedOutcomes:
        if exp.q == 0:
            out = self._mean_delegate().impute(exp)
            return ImputedOutcomes(out.t_hat, out.c_hat, out.m_hat, self.id,
                                   ("forest_q0_mean_imputation",))
        if self.fallback is None and (exp.n_treated < 2 or exp.n_control < 2):
            raise InsufficientArm(
                f"forest imputation needs 2 treated and 2 control units, got "
                f"{exp.n_treated} and {exp.n_control}"
            )
        t_hat = np.empty(exp.n_units)
        c_hat = np.empty(exp.n_units)
        for arm, hat in ((1, t_hat), (0, c_hat)):
            members = np.flatnonzero(exp.t == arm)
            outsiders = np.flatnonzero(exp.t != arm)
            z_arm = exp.z[members]
            y_arm = exp.y[members]
            if len(members) < 2:
                hat[outsiders] = self._small_arm(y_arm, len(outsiders))
                if len(members) == 1:
                    hat[members] = self._small_arm(y_arm[:0], 1)
                continue
            forest = fit_forest(z_arm, y_arm, self._arm_params(arm), n_jobs=self.n_jobs)
            # the other arm's units were never in this forest
            hat[outsiders] = predict_many(forest, exp.z[outsiders])
            if self.mode == "oob":
                try:
                    hat[members] = oob_predictions(forest)
                except NoOobTrees as err:
                    raise NoOobTrees(int(members[err.index])) from err
            else:
                keep = np.ones(len(members), dtype=bool)
                for pos, i in enumerate(members):
                    keep[pos] = False
                    hat[i] = self._fit_arm_predict(z_arm[keep], y_arm[keep], arm,
                                                   exp.z[i : i + 1])[0]
                    keep[pos] = True
        return ImputedOutcomes.from_arms(exp, t_hat, c_hat, self.id)

    def fit_predict(self, exp, keep, rows):
        keep = np.asarray(keep, dtype=bool)
        rows = np.atleast_1d(rows)
        if exp.q == 0:
            return self._mean_delegate().fit_predict(exp, keep, rows)
        out = []
        for arm in (1, 0):
            sel = keep & (exp.t == arm)
            out.append(self._fit_arm_predict(exp.z[sel], exp.y[sel], arm, exp.z[rows]))
        return out[0], out[1]


@dataclass(frozen=True, eq=False)
class ConstantImputer:
    """Imputes fixed values regardless of the data (a test and oracle utility)."""

    t_value: Union[float, np.ndarray] = 0.0
    c_value: Union[float, np.ndarray] = 0.0

    @property
    def id(self) -> str:
        return "constant"

    def impute(self, exp: Experiment) -> ImputedOutcomes:
        shape = exp.n_units
        return ImputedOutcomes.from_arms(
            exp, np.broadcast_to(self.t_value, shape).astype(float),
            np.broadcast_to(self.c_value, shape).astype(float), self.id)

    def fit_predict(self, exp, keep, rows):
        rows = np.atleast_1d(rows)
        t_all = np.broadcast_to(np.asarray(self.t_value, dtype=float), exp.n_units)
        c_all = np.broadcast_to(np.asarray(self.c_value, dtype=float), exp.n_units)
        return t_all[rows].copy(), c_all[rows].copy()


ImputerSpec = Union[MeanImputer, StrataImputer, OlsImputer, ForestImputer, ConstantImputer]


def impute(exp: Experiment, imputer: ImputerSpec) -> ImputedOutcomes:
    return imputer.impute(exp)


def impute_mean(exp: Experiment) -> ImputedOutcomes:
    return MeanImputer().impute(exp)


def impute_strata(exp: Experiment, labels) -> ImputedOutcomes:
    return StrataImputer(labels).impute(exp)


def impute_ols(exp: Experiment, include_intercept: bool = True,
               allow_fallback: bool = True) -> ImputedOutcomes:
    return OlsImputer(include_intercept, allow_fallback).impute(exp)


def impute_forest(exp: Experiment, params: ForestParams = ForestParams(),
                  mode: str = "oob") -> ImputedOutcomes:
    return ForestImputer(params, mode).impute(exp)


def is_exact_loo(imputer) -> bool:
    """True when ``impute`` never looks at the unit it imputes."""
    return not (isinstance(imputer, ForestImputer) and imputer.mode == "oob")
