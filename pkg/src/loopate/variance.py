"""Cross-validated MSE estimates, the variance bound, and the pairwise covariance estimator."""

from __future__ import annotations

import math
from dataclasses import dataclass
from itertools import combinations
from typing import Optional, Union

import numpy as np

from .core import Experiment, ImputedOutcomes
from .errors import DomainError, InsufficientArm, NonConstantP, UnsupportedImputer


@dataclass(frozen=True)
class VarianceReport:
    m_t_hat: float
    m_c_hat: float
    var_hat: float
    p: float


@dataclass(frozen=True, eq=False)
class CovDiagnostic:
    gamma_hat: np.ndarray  # symmetric N x N, NaN where not computed
    gamma_bar_hat: float
    pairs: np.ndarray  # (n_pairs, 2) unordered pairs actually used
    refits: int


def mse_hats(exp: Experiment, imputed: ImputedOutcomes, denominator: str = "sample"):
    """Leave-one-out MSEs ``(M_t, M_c)`` of the treated and control predictions.

    ``denominator="sample"`` divides by the arm sizes; ``"expected"`` divides by
    ``N p`` and ``N (1 - p)``, which makes both exactly unbiased.
    """
    tr = exp.t == 1
    co = ~tr
    sq_t = (imputed.t_hat[tr] - exp.y[tr]) ** 2
    sq_c = (imputed.c_hat[co] - exp.y[co]) ** 2
    if denominator == "sample":
        if exp.n_treated < 1 or exp.n_control < 1:
            raise InsufficientArm("MSE estimates need at least one unit per arm")
        return math.fsum(sq_t) / exp.n_treated, math.fsum(sq_c) / exp.n_control
    if denominator == "expected":
        p = exp.constant_p()
        if p is None:
            raise NonConstantP("the expected-count denominator needs a constant p")
        n_units = exp.n_units
        return math.fsum(sq_t) / (n_units * p), math.fsum(sq_c) / (n_units * (1 - p))
    raise DomainError(f"unknown denominator {denominator!r}")


def variance_bound(m_t_hat: float, m_c_hat: float, p: float, n_total: int) -> float:
    if not 0 < p < 1:
        raise DomainError("p must lie strictly in (0, 1)")
    # sums of squares; clamp only guards against rounding dust
    m_t = max(m_t_hat, 0.0)
    m_c = max(m_c_hat, 0.0)
    return ((1 - p) / p * m_t + p / (1 - p) * m_c + 2 * math.sqrt(m_t * m_c)) / n_total


def variance_report(exp: Experiment, imputed: ImputedOutcomes,
                    denominator: str = "sample") -> VarianceReport:
    p = exp.constant_p()
    if p is None:
        raise NonConstantP("variance estimation requires a constant treatment probability")
    m_t, m_c = mse_hats(exp, imputed, denominator)
    return VarianceReport(m_t, m_c, variance_bound(m_t, m_c, p, exp.n_units), p)


def _check_refittable(imputer) -> None:
    from .imputers import is_exact_loo

    if not is_exact_loo(imputer):
        raise UnsupportedImputer("covariance refits are undefined for out-of-bag forests")


def _pair_value(exp, i, j, loo_t, loo_c, two_out):
    """Four-case estimate for one pair from the LOO fits and the fit without both."""
    t_i_minus, c_i_minus, t_j_minus, c_j_minus = two_out
    p_i, p_j = exp.p[i], exp.p[j]
    d_t_i = loo_t[i] - t_i_minus  # t_i^{+j} - t_i^{-j}
    d_c_i = c_i_minus - loo_c[i]  # c_i^{-j} - c_i^{+j}
    d_t_j = loo_t[j] - t_j_minus
    d_c_j = c_j_minus - loo_c[j]
    ti, tj = exp.t[i], exp.t[j]
    if ti == 1 and tj == 1:
        return (1 - p_i) * (1 - p_j) / (p_i * p_j) * d_t_i * d_t_j
    if ti == 0 and tj == 1:
        return d_t_i * d_c_j
    if ti == 1 and tj == 0:
        return d_c_i * d_t_j
    return p_i * p_j / ((1 - p_i) * (1 - p_j)) * d_c_i * d_c_j


def _two_out(exp, imputer, i, j):
    keep = np.ones(exp.n_units, dtype=bool)
    keep[[i, j]] = False
    t_pred, c_pred = imputer.fit_predict(exp, keep, np.array([i, j]))
    return t_pred[0], c_pred[0], t_pred[1], c_pred[1]


def cov_hat_pair(exp: Experiment, imputer, i: int, j: int,
                 imputed: Optional[ImputedOutcomes] = None) -> float:
    """Unbiased estimate of ``Cov(m_hat_i U_i, m_hat_j U_j)``.

    The "+" fits are the usual leave-one-out fits (``imputed``); the "-" fit
    drops both units. Unbiasedness needs an imputer whose treated predictions
    ignore control units and vice versa.
    """
    if i == j:
        raise DomainError("cov_hat_pair needs two distinct units")
    _check_refittable(imputer)
    if imputed is None:
        imputed = imputer.impute(exp)
    return float(_pair_value(exp, i, j, imputed.t_hat, imputed.c_hat,
                             _two_out(exp, imputer, i, j)))


def gamma_bar_hat(exp: Experiment, imputer, pair_budget: Union[int, str] = "all",
                  seed: int = 0) -> CovDiagnostic:
    """Average the pairwise covariance estimate over all pairs or a uniform subsample."""
    _check_refittable(imputer)
    n_units = exp.n_units
    all_pairs = np.array(list(combinations(range(n_units), 2)), dtype=np.int64)
    if pair_budget != "all" and int(pair_budget) < len(all_pairs):
        if int(pair_budget) < 1:
            raise DomainError("pair_budget must be positive")
        rng = np.random.default_rng(seed)
        pick = np.sort(rng.choice(len(all_pairs), size=int(pair_budget), replace=False))
        pairs = all_pairs[pick]
    else:
        pairs = all_pairs
    imputed = imputer.impute(exp)
    gamma = np.full((n_units, n_units), np.nan)
    values = np.empty(len(pairs))
    for k, (i, j) in enumerate(pairs):
        v = _pair_value(exp, i, j, imputed.t_hat, imputed.c_hat, _two_out(exp, imputer, i, j))
        gamma[i, j] = gamma[j, i] = v
        values[k] = v
    return CovDiagnostic(gamma, float(math.fsum(values) / len(values)), pairs, len(pairs) + 1)


def variance_with_gamma(var_bound: float, gamma_bar: float, n_total: int) -> float:
    """Add the pairwise covariance term ``(N - 1) gamma_bar / N`` to the bound, floored at 0."""
    return max(var_bound + (n_total - 1) * gamma_bar / n_total, 0.0)
