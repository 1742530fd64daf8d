"""Data model and estimator arithmetic for the LOOP estimator.

Observed data live in :class:`Experiment`; imputers turn an experiment into
:class:`ImputedOutcomes`; :func:`loop_estimate` combines the two into an
:class:`EstimateReport`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from statistics import NormalDist
from typing import Optional, Union

import numpy as np

from .errors import DomainError, InsufficientArm, NonConstantP

# ---------------------------------------------------------------------------
# Designs
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Bernoulli:
    """Independent assignments with the per-unit probabilities of the experiment."""

    kind = "bernoulli"


@dataclass(frozen=True)
class CompleteRandomization:
    n_fixed: int
    kind = "complete"


@dataclass(frozen=True, eq=False)
class Blocked:
    blocks: np.ndarray
    kind = "blocked"

    def __post_init__(self):
        object.__setattr__(self, "blocks", _frozen(np.asarray(self.blocks)))


@dataclass(frozen=True, eq=False)
class Paired:
    pairs: np.ndarray
    kind = "paired"

    def __post_init__(self):
        object.__setattr__(self, "pairs", _frozen(np.asarray(self.pairs)))

    def partner(self, i: int) -> int:
        mates = np.flatnonzero(self.pairs == self.pairs[i])
        return int(mates[mates != i][0])


DesignDescriptor = Union[Bernoulli, CompleteRandomization, Blocked, Paired]


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


def _check_design(design, t: np.ndarray) -> None:
    n_units = len(t)
    if isinstance(design, Bernoulli):
        return
    if isinstance(design, CompleteRandomization):
        n = int(t.sum())
        if design.n_fixed != n:
            raise DomainError(
                f"n_fixed={design.n_fixed} but {n} units are treated"
            )
        if not 2 <= n <= n_units - 2:
            raise DomainError(f"n_fixed={n} must lie in [2, N-2]")
        return
    if isinstance(design, Blocked):
        if len(design.blocks) != n_units:
            raise DomainError("block labels must have one entry per unit")
        for b in np.unique(design.blocks):
            tb = t[design.blocks == b]
            if tb.sum() < 1 or tb.sum() > len(tb) - 1:
                raise DomainError(f"block {b.item()!r} needs at least one treated and one control unit")
        return
    if isinstance(design, Paired):
        if len(design.pairs) != n_units:
            raise DomainError("pair labels must have one entry per unit")
        for b in np.unique(design.pairs):
            tb = t[design.pairs == b]
            if len(tb) != 2 or tb.sum() != 1:
                raise DomainError(
                    f"pair {b!r} must have exactly two members with opposite assignments"
                )
        return
    raise DomainError(f"unknown design {design!r}")


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Experiment:
    """Observed outcomes ``y``, assignments ``t``, covariates ``z``, probabilities ``p``."""

    y: np.ndarray
    t: np.ndarray
    z: np.ndarray
    p: np.ndarray
    design: DesignDescriptor = field(default_factory=Bernoulli)

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float)
        t_raw = np.asarray(self.t)
        n_units = len(y)
        if y.ndim != 1:
            raise DomainError("y must be one-dimensional")
        if n_units < 4:
            raise DomainError(f"need at least 4 units, got {n_units}")
        if t_raw.shape != (n_units,):
            raise DomainError("t must have the same length as y")
        if not np.all((t_raw == 0) | (t_raw == 1)):
            raise DomainError("treatment indicators must be 0 or 1")
        t = t_raw.astype(np.int8)

        p = np.asarray(self.p, dtype=float)
        if p.ndim == 0:
            p = np.full(n_units, float(p))
        if p.shape != (n_units,):
            raise DomainError("p must be a scalar or have one entry per unit")
        if not np.all((p > 0) & (p < 1)):
            raise DomainError("every treatment probability must lie strictly in (0, 1)")

        z = np.asarray(self.z, dtype=float)
        if z.size == 0:
            z = np.zeros((n_units, 0))
        elif z.ndim == 1:
            z = z.reshape(n_units, 1)
        if z.shape[0] != n_units or z.ndim != 2:
            raise DomainError("z must be an N x q matrix")
        if not np.all(np.isfinite(z)) or not np.all(np.isfinite(y)):
            raise DomainError("outcomes and covariates must be finite")

        _check_design(self.design, t)
        for name, value in (("y", y), ("t", t), ("z", z), ("p", p)):
            object.__setattr__(self, name, _frozen(value))

    @property
    def n_units(self) -> int:
        return len(self.y)

    @property
    def n_treated(self) -> int:
        return int(self.t.sum())

    @property
    def n_control(self) -> int:
        return self.n_units - self.n_treated

    @property
    def treated(self) -> np.ndarray:
        return np.flatnonzero(self.t == 1)

    @property
    def control(self) -> np.ndarray:
        return np.flatnonzero(self.t == 0)

    @property
    def q(self) -> int:
        return self.z.shape[1]

    def constant_p(self) -> Optional[float]:
        """The common treatment probability, or ``None`` when it varies."""
        if np.all(self.p == self.p[0]):
            return float(self.p[0])
        return None

    def with_outcomes(self, y=None, t=None, design=None) -> "Experiment":
        return Experiment(
            y=self.y if y is None else y,
            t=self.t if t is None else t,
            z=self.z,
            p=self.p,
            design=self.design if design is None else design,
        )


@dataclass(frozen=True, eq=False)
class ImputedOutcomes:
    t_hat: np.ndarray
    c_hat: np.ndarray
    m_hat: np.ndarray
    imputer_id: str
    caveats: tuple = ()

    @classmethod
    def from_arms(cls, exp: Experiment, t_hat, c_hat, imputer_id: str, caveats=()):
        t_hat = np.asarray(t_hat, dtype=float)
        c_hat = np.asarray(c_hat, dtype=float)
        m_hat = (1.0 - exp.p) * t_hat + exp.p * c_hat
        return cls(t_hat, c_hat, m_hat, imputer_id, tuple(caveats))


@dataclass(frozen=True, eq=False)
class EstimateReport:
    tau_hat: float
    tau_units: np.ndarray
    var_hat: Optional[float]
    se: Optional[float]
    ci_level: float
    ci: Optional[tuple]
    m_t_hat: Optional[float]
    m_c_hat: Optional[float]
    n_treated: int
    n_control: int
    imputer_id: str
    caveats: tuple = ()
    drop_mc_se: Optional[float] = None


# ---------------------------------------------------------------------------
# Estimator arithmetic
# ---------------------------------------------------------------------------


def _check_p(p) -> None:
    if not np.all((np.asarray(p) > 0) & (np.asarray(p) < 1)):
        raise DomainError("treatment probability must lie strictly in (0, 1)")


def signed_weight(t_i, p_i):
    """Signed inverse-probability weight: ``1/p`` if treated, ``-1/(1-p)`` otherwise.

    Works elementwise on arrays.
    """
    _check_p(p_i)
    t_arr = np.asarray(t_i)
    p_arr = np.asarray(p_i, dtype=float)
    out = np.where(t_arr == 1, 1.0 / p_arr, -1.0 / (1.0 - p_arr))
    return float(out) if out.ndim == 0 else out


def combine_m(t_hat, c_hat, p_i):
    _check_p(p_i)
    p_arr = np.asarray(p_i, dtype=float)
    out = (1.0 - p_arr) * np.asarray(t_hat, dtype=float) + p_arr * np.asarray(c_hat, dtype=float)
    return float(out) if out.ndim == 0 else out


def unit_effect(y_i, m_hat_i, u_i):
    out = (np.asarray(y_i, dtype=float) - np.asarray(m_hat_i, dtype=float)) * np.asarray(u_i, dtype=float)
    return float(out) if out.ndim == 0 else out


def simple_difference(exp: Experiment) -> float:
    n = exp.n_treated
    if n == 0 or n == exp.n_units:
        raise InsufficientArm("simple difference needs at least one unit in each arm")
    return float(exp.y[exp.t == 1].mean() - exp.y[exp.t == 0].mean())


def require_arms(exp: Experiment, minimum: int = 2) -> None:
    if exp.n_treated < minimum or exp.n_control < minimum:
        raise InsufficientArm(
            f"need at least {minimum} treated and {minimum} control units, got "
            f"{exp.n_treated} and {exp.n_control}"
        )


def normal_ci(center: float, se: float, level: float) -> tuple:
    if not 0 < level < 1:
        raise DomainError("ci_level must lie in (0, 1)")
    half = NormalDist().inv_cdf((1 + level) / 2) * se
    return (center - half, center + half)


def loop_estimate(
    exp: Experiment,
    imputed: ImputedOutcomes,
    ci_level: float = 0.95,
    variance: bool = True,
    mse_denominator: str = "sample",
) -> EstimateReport:
    """Average the per-unit effects ``(Y_i - m_hat_i) U_i`` and attach a variance bound.

    The CI is a normal approximation and only as good as the bound it uses.
    With ``variance=False`` the variance fields are left as ``None``; that is
    also the only way to estimate with heterogeneous treatment probabilities.
    """
    from . import variance as _variance

    require_arms(exp)
    if len(imputed.m_hat) != exp.n_units:
        raise DomainError("imputed outcomes do not match the experiment size")
    u = signed_weight(exp.t, exp.p)
    tau_units = unit_effect(exp.y, imputed.m_hat, u)
    tau_hat = float(math.fsum(tau_units) / exp.n_units)

    var_hat = se = ci = m_t = m_c = None
    if variance:
        p = exp.constant_p()
        if p is None:
            raise NonConstantP("variance estimation requires a constant treatment probability")
        m_t, m_c = _variance.mse_hats(exp, imputed, denominator=mse_denominator)
        var_hat = _variance.variance_bound(m_t, m_c, p, exp.n_units)
        se = math.sqrt(var_hat)
        ci = normal_ci(tau_hat, se, ci_level)

    return EstimateReport(
        tau_hat=tau_hat,
        tau_units=tau_units,
        var_hat=var_hat,
        se=se,
        ci_level=ci_level,
        ci=ci,
        m_t_hat=m_t,
        m_c_hat=m_c,
        n_treated=exp.n_treated,
        n_control=exp.n_control,
        imputer_id=imputed.imputer_id,
        caveats=imputed.caveats,
    )
