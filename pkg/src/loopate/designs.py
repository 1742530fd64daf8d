"""Random drop for dependent assignment designs.

Under complete, blocked or paired randomization the assignments of the other
units carry information about ``T_i``. Dropping one extra opposite-arm unit
(from the same block, or the partner in a pair) alongside unit ``i`` restores
the independence of ``m_hat_i`` and ``T_i``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from fractions import Fraction
from itertools import combinations

import numpy as np

from .core import (Bernoulli, Blocked, CompleteRandomization, EstimateReport, Experiment,
                   ImputedOutcomes, Paired, loop_estimate, signed_weight)
from .errors import DomainError, EmptyOppositeArm, InsufficientArm, UnsupportedImputer
from .imputers import MeanImputer, StrataImputer


@dataclass(frozen=True)
class DropPlan:
    unit: int
    dropped: frozenset


def drop_pool(exp: Experiment, i: int):
    """Units one of which is dropped together with ``i``; ``None`` when no extra drop is needed."""
    design = exp.design
    if isinstance(design, Bernoulli):
        return None
    opposite = exp.t != exp.t[i]
    if isinstance(design, CompleteRandomization):
        pool = np.flatnonzero(opposite)
        block = None
    elif isinstance(design, Blocked):
        block = design.blocks[i]
        pool = np.flatnonzero(opposite & (design.blocks == block))
    elif isinstance(design, Paired):
        return np.array([design.partner(i)])
    else:
        raise DomainError(f"unknown design {design!r}")
    if len(pool) == 0:
        raise EmptyOppositeArm(i, None if block is None else block.item())
    return pool


def _unit_rng(seed: int, rep: int, unit: int) -> np.random.Generator:
    return np.random.default_rng((int(seed) & 0xFFFFFFFFFFFFFFFF, rep, unit))


def random_drop_plan(exp: Experiment, i: int, seed: int, rep: int = 0) -> DropPlan:
    pool = drop_pool(exp, i)
    if pool is None:
        return DropPlan(i, frozenset({i}))
    if len(pool) == 1:
        return DropPlan(i, frozenset({i, int(pool[0])}))
    k = int(pool[_unit_rng(seed, rep, i).integers(len(pool))])
    return DropPlan(i, frozenset({i, k}))


def _strata_labels(exp, imputer):
    if isinstance(imputer, MeanImputer):
        return np.zeros(exp.n_units, dtype=np.int64), imputer.fallback
    if isinstance(imputer, StrataImputer):
        _, codes = np.unique(imputer.labels, return_inverse=True)
        return codes, imputer.fallback
    raise UnsupportedImputer(
        "expectation-mode random drop is available for the mean and strata imputers only"
    )


def _ratio(total, count, fallback):
    if count == 0:
        if fallback is None:
            raise InsufficientArm("random drop emptied an arm of a stratum")
        return float(fallback)
    return total / count


def expected_drop_imputation(exp: Experiment, imputer) -> ImputedOutcomes:
    """Exact average over all possible drops of the mean/strata imputation."""
    codes, fallback = _strata_labels(exp, imputer)
    y, t = exp.y, exp.t
    k = codes.max() + 1
    n_arm = np.stack([np.bincount(codes, weights=(t == a), minlength=k) for a in (0, 1)])
    s_arm = np.stack([np.bincount(codes, weights=y * (t == a), minlength=k) for a in (0, 1)])
    hats = {0: np.empty(exp.n_units), 1: np.empty(exp.n_units)}
    for i in range(exp.n_units):
        s = codes[i]
        own, opp = int(t[i]), 1 - int(t[i])
        hats[own][i] = _ratio(s_arm[own, s] - y[i], n_arm[own, s] - 1, fallback)
        pool = drop_pool(exp, i)
        full = (s_arm[opp, s], n_arm[opp, s])
        if pool is None:
            hats[opp][i] = _ratio(full[0], full[1], fallback)
            continue
        inside = pool[codes[pool] == s]
        n_outside = len(pool) - len(inside)
        total = 0.0
        if n_outside:
            total += n_outside * _ratio(full[0], full[1], fallback)
        for kk in inside:
            total += _ratio(full[0] - y[kk], full[1] - 1, fallback)
        hats[opp][i] = total / len(pool)
    return ImputedOutcomes.from_arms(exp, hats[1], hats[0], f"random_drop_expectation[{imputer.id}]")


def sampled_drop_imputation(exp: Experiment, imputer, reps: int, seed: int):
    """Average imputations over ``reps`` sampled drops.

    Returns the averaged outcomes and the per-rep unit effects ``(reps, N)``.
    """
    if reps < 1:
        raise DomainError("reps must be >= 1")
    n_units = exp.n_units
    t_sum = np.zeros(n_units)
    c_sum = np.zeros(n_units)
    m_reps = np.empty((reps, n_units))
    keep = np.ones(n_units, dtype=bool)
    for r in range(reps):
        for i in range(n_units):
            plan = random_drop_plan(exp, i, seed, r)
            idx = list(plan.dropped)
            keep[idx] = False
            t_i, c_i = imputer.fit_predict(exp, keep, np.array([i]))
            keep[idx] = True
            t_sum[i] += t_i[0]
            c_sum[i] += c_i[0]
            m_reps[r, i] = (1 - exp.p[i]) * t_i[0] + exp.p[i] * c_i[0]
    imputed = ImputedOutcomes.from_arms(exp, t_sum / reps, c_sum / reps,
                                        f"random_drop_sampled[{imputer.id}]")
    return imputed, m_reps


def loop_with_random_drop(exp: Experiment, imputer, reps: int = 100, seed: int = 0,
                          mode: str = "sampled", ci_level: float = 0.95,
                          variance: bool = True,
                          mse_denominator: str = "sample") -> EstimateReport:
    """LOOP estimate with random drop, averaging the per-unit effects over drops.

    The variance bound is still reported, flagged, because the covariance
    structure it relies on changes under dependent assignment.
    """
    if mode == "expectation":
        imputed = expected_drop_imputation(exp, imputer)
        drop_se = 0.0
    elif mode == "sampled":
        imputed, m_reps = sampled_drop_imputation(exp, imputer, reps, seed)
        u = signed_weight(exp.t, exp.p)
        tau_reps = ((exp.y - m_reps) * u).mean(axis=1)
        drop_se = float(tau_reps.std(ddof=1) / math.sqrt(reps)) if reps > 1 else None
    else:
        raise DomainError(f"unknown random drop mode {mode!r}")
    report = loop_estimate(exp, imputed, ci_level, variance, mse_denominator)
    caveats = list(report.caveats)
    if variance and not isinstance(exp.design, Bernoulli):
        caveats.append("variance_bound_assumes_independent_assignment")
    return replace(report, caveats=tuple(caveats), drop_mc_se=drop_se)


def drop_arrangement_distribution(n_units: int, n_treated: int, unit: int = 0):
    """Exact distribution of the other units' pattern after random drop.

    Enumerates every complete-randomization assignment and every drop choice
    for ``unit``. Returns ``{arrangement: {0: P(. | T_unit=0), 1: P(. | T_unit=1)}}``
    where an arrangement is a string over the other units using ``T``, ``C``,
    and ``\\`` for the dropped one.
    """
    if not 1 <= n_treated <= n_units - 1:
        raise DomainError("need at least one unit in each arm")
    dist: dict = {}
    conditional_total = {0: 0, 1: 0}
    for treated in combinations(range(n_units), n_treated):
        t = np.zeros(n_units, dtype=int)
        t[list(treated)] = 1
        conditional_total[int(t[unit])] += 1
    for treated in combinations(range(n_units), n_treated):
        t = np.zeros(n_units, dtype=int)
        t[list(treated)] = 1
        arm = int(t[unit])
        pool = [k for k in range(n_units) if t[k] != arm]
        for k in pool:
            chars = ["\\" if j == k else "TC"[1 - t[j]] for j in range(n_units) if j != unit]
            key = "".join(chars)
            w = Fraction(1, conditional_total[arm]) * Fraction(1, len(pool))
            entry = dist.setdefault(key, {0: Fraction(0), 1: Fraction(0)})
            entry[arm] += w
    return dist
