"""Ground truth: potential-outcome tables, exact enumeration, simulations.

The enumeration oracle sums over every assignment the design can produce,
weighted by its probability, so expectations and variances are exact rather
than simulated. The Monte Carlo harness reproduces the two simulation studies
(fixed three-group table; binary outcomes with noise covariates).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from itertools import combinations, product
from typing import Callable, Dict, Optional, Sequence

import numpy as np

from .core import (Bernoulli, Blocked, CompleteRandomization, Experiment, ImputedOutcomes,
                   Paired, signed_weight, simple_difference)
from .designs import drop_pool
from .errors import (DomainError, LoopError, RankDeficient, SupportTooLarge,
                     UndefinedOnAssignment)
from .forest import ForestParams
from .imputers import ForestImputer

DEFAULT_SUPPORT_CAP = 2**20


@dataclass(frozen=True, eq=False)
class PotentialOutcomesTable:
    t: np.ndarray
    c: np.ndarray
    z: np.ndarray
    p: np.ndarray
    design: object = field(default_factory=Bernoulli)

    def __post_init__(self):
        t = np.asarray(self.t, dtype=float)
        n_units = len(t)
        c = np.asarray(self.c, dtype=float)
        z = np.asarray(self.z, dtype=float)
        if z.size == 0:
            z = np.zeros((n_units, 0))
        elif z.ndim == 1:
            z = z.reshape(n_units, 1)
        p = np.asarray(self.p, dtype=float)
        if p.ndim == 0:
            p = np.full(n_units, float(p))
        if c.shape != t.shape or z.shape[0] != n_units or p.shape != t.shape:
            raise DomainError("potential outcome table columns have inconsistent lengths")
        for name, value in (("t", t), ("c", c), ("z", z), ("p", p)):
            object.__setattr__(self, name, value)

    @property
    def n_units(self) -> int:
        return len(self.t)

    @property
    def tau(self) -> np.ndarray:
        return self.t - self.c

    @property
    def tau_bar(self) -> float:
        return float(math.fsum(self.tau) / self.n_units)

    @property
    def m(self) -> np.ndarray:
        return (1 - self.p) * self.t + self.p * self.c

    def outcomes(self, assignment) -> np.ndarray:
        a = np.asarray(assignment)
        return np.where(a == 1, self.t, self.c)

    def realize(self, assignment) -> Experiment:
        a = np.asarray(assignment)
        design = self.design
        if isinstance(design, CompleteRandomization) and design.n_fixed != a.sum():
            raise DomainError("assignment does not match the design's treated count")
        return Experiment(self.outcomes(a), a, self.z, self.p, design)


# ---------------------------------------------------------------------------
# enumeration
# ---------------------------------------------------------------------------


def assignment_support(po: PotentialOutcomesTable, cap: int = DEFAULT_SUPPORT_CAP,
                       block_treated: Optional[dict] = None):
    """All assignments the design can produce and their probabilities.

    Blocked designs need ``block_treated`` (block label -> treated count).
    """
    design = po.design
    n_units = po.n_units
    if isinstance(design, Bernoulli):
        if 2**n_units > cap:
            raise SupportTooLarge(f"2^{n_units} assignments exceed the cap {cap}")
        bits = (np.arange(2**n_units)[:, None] >> np.arange(n_units)[None, :]) & 1
        assignments = bits.astype(np.int8)
        probs = np.prod(np.where(assignments == 1, po.p, 1 - po.p), axis=1)
        return assignments, probs
    if isinstance(design, CompleteRandomization):
        size = math.comb(n_units, design.n_fixed)
        if size > cap:
            raise SupportTooLarge(f"{size} assignments exceed the cap {cap}")
        assignments = np.zeros((size, n_units), dtype=np.int8)
        for row, treated in enumerate(combinations(range(n_units), design.n_fixed)):
            assignments[row, list(treated)] = 1
        return assignments, np.full(size, 1.0 / size)
    if isinstance(design, (Blocked, Paired)):
        labels = design.blocks if isinstance(design, Blocked) else design.pairs
        groups = [np.flatnonzero(labels == b) for b in np.unique(labels)]
        if isinstance(design, Paired):
            counts = [1] * len(groups)
        else:
            if block_treated is None:
                raise DomainError("blocked enumeration needs the treated count of every block")
            counts = [block_treated[labels[g[0]].item()] for g in groups]
        choices = [list(combinations(g, k)) for g, k in zip(groups, counts)]
        size = math.prod(len(ch) for ch in choices)
        if size > cap:
            raise SupportTooLarge(f"{size} assignments exceed the cap {cap}")
        assignments = np.zeros((size, n_units), dtype=np.int8)
        for row, combo in enumerate(product(*choices)):
            for treated in combo:
                assignments[row, list(treated)] = 1
        return assignments, np.full(size, 1.0 / size)
    raise DomainError(f"unknown design {design!r}")


def drop_averaged_imputation(exp: Experiment, imputer) -> ImputedOutcomes:
    """Imputation averaged over every possible random drop, unit by unit."""
    n_units = exp.n_units
    t_hat = np.empty(n_units)
    c_hat = np.empty(n_units)
    keep = np.ones(n_units, dtype=bool)
    for i in range(n_units):
        pool = drop_pool(exp, i)
        if pool is None:
            pool = [None]
        t_acc = c_acc = 0.0
        for k in pool:
            keep[i] = False
            if k is not None:
                keep[k] = False
            t_i, c_i = imputer.fit_predict(exp, keep, np.array([i]))
            keep[i] = True
            if k is not None:
                keep[k] = True
            t_acc += t_i[0]
            c_acc += c_i[0]
        t_hat[i] = t_acc / len(pool)
        c_hat[i] = c_acc / len(pool)
    return ImputedOutcomes.from_arms(exp, t_hat, c_hat, f"random_drop_exact[{imputer.id}]")


@dataclass(frozen=True, eq=False)
class OracleSummary:
    mean_tau_hat: float
    var_tau_hat: float
    tau_bar: float
    mean_tau_units: np.ndarray  # E[tau_hat_i]
    var_tau_units: np.ndarray  # Var(tau_hat_i)
    mse_m: np.ndarray  # MSE(m_hat_i)
    mse_t: np.ndarray
    mse_c: np.ndarray
    support_size: int
    defined_mass: float  # probability of the assignments the estimator was defined on
    skipped: int
    gamma: Optional[np.ndarray] = None  # Cov(tau_hat_i, tau_hat_j)
    cov_mu: Optional[np.ndarray] = None  # Cov(m_hat_i U_i, m_hat_j U_j)
    rho: Optional[np.ndarray] = None  # Corr(m_hat_i U_i, m_hat_j U_j)
    probability_total: float = 1.0


def _weighted_cov(x, w):
    centered = x - w @ x
    return (centered * w[:, None]).T @ centered


def enumerate_oracle(po: PotentialOutcomesTable, imputer, cap: int = DEFAULT_SUPPORT_CAP,
                     allow_conditioning: bool = False, random_drop: bool = False,
                     pairwise: bool = False, block_treated: Optional[dict] = None) -> OracleSummary:
    """Exact moments of the LOOP estimator over the full randomization distribution.

    With ``random_drop`` each unit's imputation is averaged over every drop
    choice, which gives the moments of the drop-averaged estimator.
    Assignments on which the imputer fails raise :class:`UndefinedOnAssignment`
    unless ``allow_conditioning`` is set, in which case they are skipped and
    the moments are conditional on the rest (see ``defined_mass``).
    """
    assignments, probs = assignment_support(po, cap, block_treated)
    n_units = po.n_units
    size = len(assignments)
    tau_units = np.empty((size, n_units))
    m_hat = np.empty((size, n_units))
    t_hat = np.empty((size, n_units))
    c_hat = np.empty((size, n_units))
    mu = np.empty((size, n_units))
    ok = np.ones(size, dtype=bool)
    for s, a in enumerate(assignments):
        try:
            exp = po.realize(a)
            if random_drop:
                imputed = drop_averaged_imputation(exp, imputer)
            else:
                imputed = imputer.impute(exp)
        except LoopError as err:
            if not allow_conditioning:
                raise UndefinedOnAssignment(a, err) from err
            ok[s] = False
            continue
        u = signed_weight(a, po.p)
        tau_units[s] = (exp.y - imputed.m_hat) * u
        m_hat[s] = imputed.m_hat
        t_hat[s] = imputed.t_hat
        c_hat[s] = imputed.c_hat
        mu[s] = imputed.m_hat * u
    mass = float(probs[ok].sum())
    if mass == 0:
        raise UndefinedOnAssignment(assignments[0], "estimator undefined everywhere")
    w = probs[ok] / mass
    tau_units, m_hat, t_hat, c_hat, mu = (a[ok] for a in (tau_units, m_hat, t_hat, c_hat, mu))
    tau_hat = tau_units.mean(axis=1)
    mean_tau = float(w @ tau_hat)
    var_tau = float(w @ (tau_hat - mean_tau) ** 2)
    mean_units = w @ tau_units
    var_units = w @ (tau_units - mean_units) ** 2
    gamma = cov_mu = rho = None
    if pairwise:
        gamma = _weighted_cov(tau_units, w)
        cov_mu = _weighted_cov(mu, w)
        sd = np.sqrt(np.diag(cov_mu))
        with np.errstate(divide="ignore", invalid="ignore"):
            rho = cov_mu / np.outer(sd, sd)
    return OracleSummary(
        mean_tau_hat=mean_tau,
        var_tau_hat=var_tau,
        tau_bar=po.tau_bar,
        mean_tau_units=mean_units,
        var_tau_units=var_units,
        mse_m=w @ (m_hat - po.m) ** 2,
        mse_t=w @ (t_hat - po.t) ** 2,
        mse_c=w @ (c_hat - po.c) ** 2,
        support_size=size,
        defined_mass=mass,
        skipped=int((~ok).sum()),
        gamma=gamma,
        cov_mu=cov_mu,
        rho=rho,
        probability_total=float(probs.sum()),
    )


def randomization_expectation(po: PotentialOutcomesTable, statistic: Callable,
                              cap: int = DEFAULT_SUPPORT_CAP,
                              block_treated: Optional[dict] = None):
    """Exact expectation of ``statistic(experiment)`` over the design."""
    assignments, probs = assignment_support(po, cap, block_treated)
    total = None
    for a, w in zip(assignments, probs):
        value = np.asarray(statistic(po.realize(a)), dtype=float) * w
        total = value if total is None else total + value
    return total


# ---------------------------------------------------------------------------
# simulation generators
# ---------------------------------------------------------------------------


SIM1_MEANS = {0: (0.0, 1.0), 1: (1.0, 1.0), 2: (1.0, 2.0)}  # z -> (control, treated)
SIM1_SD = 0.1


def gen_sim1(seed: int) -> PotentialOutcomesTable:
    """Thirty units, ten at each of z = 0, 1, 2, normal potential outcomes with SD 0.1."""
    rng = np.random.default_rng(seed)
    z = np.repeat([0.0, 1.0, 2.0], 10)
    mean_c = np.array([SIM1_MEANS[int(v)][0] for v in z])
    mean_t = np.array([SIM1_MEANS[int(v)][1] for v in z])
    c = mean_c + SIM1_SD * rng.standard_normal(30)
    t = mean_t + SIM1_SD * rng.standard_normal(30)
    return PotentialOutcomesTable(t, c, z.reshape(-1, 1), np.full(30, 0.5))


def sim2_group_probabilities(z1, c: float) -> np.ndarray:
    """Probabilities of the three outcome groups, shape ``(len(z1), 3)``."""
    z1 = np.atleast_1d(np.asarray(z1, dtype=float))
    w = np.stack([np.ones_like(z1), np.exp(0.5 * c * z1), np.exp(c * z1)], axis=1)
    return w / w.sum(axis=1, keepdims=True)


SIM2_GROUP_OUTCOMES = np.array([[0.0, 0.0], [0.0, 1.0], [1.0, 1.0]])  # (control, treated)


def gen_sim2(n_units: int, k: int, c: float, seed: int) -> PotentialOutcomesTable:
    """Binary outcomes driven by one predictive covariate plus ``k`` noise covariates."""
    if n_units < 10:
        raise DomainError("n_units must be >= 10")
    if k < 0:
        raise DomainError("k must be >= 0")
    if not c > 0:
        raise DomainError("c must be positive")
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((n_units, k + 1))
    probs = sim2_group_probabilities(z[:, 0], c)
    u = rng.random(n_units)
    group = (u[:, None] > np.cumsum(probs, axis=1)[:, :2]).sum(axis=1)
    outcomes = SIM2_GROUP_OUTCOMES[group]
    return PotentialOutcomesTable(outcomes[:, 1], outcomes[:, 0], z, np.full(n_units, 0.5))


# ---------------------------------------------------------------------------
# estimators for the harness; each maps (experiment, seed) -> (point, variance)
# ---------------------------------------------------------------------------


def simple_difference_estimator(exp: Experiment, seed: int = 0):
    """Difference in means with the Neyman variance estimate."""
    y_t = exp.y[exp.t == 1]
    y_c = exp.y[exp.t == 0]
    if len(y_t) < 2 or len(y_c) < 2:
        from .errors import InsufficientArm

        raise InsufficientArm("Neyman variance needs two units per arm")
    var = y_t.var(ddof=1) / len(y_t) + y_c.var(ddof=1) / len(y_c)
    return simple_difference(exp), float(var)


def ols_baseline(exp: Experiment, seed: int = 0):
    """OLS coefficient on T in Y ~ 1 + T + Z with its textbook variance."""
    x = np.hstack([np.ones((exp.n_units, 1)), exp.t.reshape(-1, 1).astype(float), exp.z])
    n_obs, n_cols = x.shape
    beta, _, rank, _ = np.linalg.lstsq(x, exp.y, rcond=None)
    if rank < n_cols or n_obs <= n_cols:
        raise RankDeficient(f"OLS design has rank {rank} with {n_cols} columns and {n_obs} rows")
    resid = exp.y - x @ beta
    sigma2 = float(resid @ resid) / (n_obs - n_cols)
    xtx_inv = np.linalg.inv(x.T @ x)
    return float(beta[1]), max(sigma2 * float(xtx_inv[1, 1]), 0.0)


def loop_estimator(imputer, mse_denominator: str = "sample"):
    """LOOP point estimate and variance bound; forests are reseeded per replication."""
    from .core import loop_estimate

    def estimate(exp: Experiment, seed: int = 0):
        imp = imputer
        if isinstance(imp, ForestImputer):
            imp = replace(imp, params=replace(imp.params, seed=seed))
        report = loop_estimate(exp, imp.impute(exp), variance=True,
                               mse_denominator=mse_denominator)
        return report.tau_hat, report.var_hat

    return estimate


def default_estimators(n_trees: int = 500, min_node_size: int = 5):
    forest = ForestImputer(ForestParams(n_trees=n_trees, min_node_size=min_node_size))
    return {
        "loop": loop_estimator(forest),
        "simple_difference": simple_difference_estimator,
        "ols": ols_baseline,
    }


# ---------------------------------------------------------------------------
# Monte Carlo harness
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EstimatorSummary:
    bias: float
    mc_se: float  # Monte Carlo standard error of the bias
    mean_nominal_se: float
    true_se: float
    reps: int


@dataclass(frozen=True)
class MonteCarloSummary:
    estimators: Dict[str, EstimatorSummary]
    reps: int
    seed: int
    resamples: int
    draw: str
    axis: Optional[str] = None
    axis_value: Optional[float] = None


def _draw_assignment(po: PotentialOutcomesTable, rng: np.random.Generator) -> np.ndarray:
    design = po.design
    if isinstance(design, Bernoulli):
        return (rng.random(po.n_units) < po.p).astype(np.int8)
    if isinstance(design, CompleteRandomization):
        a = np.zeros(po.n_units, dtype=np.int8)
        a[rng.choice(po.n_units, size=design.n_fixed, replace=False)] = 1
        return a
    raise DomainError("random draws are implemented for Bernoulli and complete designs")


def _rep_seed(seed: int, rep: int) -> int:
    return int(np.random.SeedSequence((int(seed) & 0xFFFFFFFFFFFFFFFF, rep)).generate_state(1, np.uint64)[0])


def monte_carlo(source, estimators: Dict[str, Callable], reps: int,
                regenerate_po: bool = False, seed: int = 0, draw: str = "random",
                max_resamples: int = 10_000) -> MonteCarloSummary:
    """Replicate the experiment and summarize bias and standard errors per estimator.

    ``source`` is a table, or with ``regenerate_po`` a callable ``seed -> table``
    drawn afresh each replication (bias is then measured against each draw's own
    average effect). Assignments on which any estimator is undefined are redrawn
    and counted in ``resamples``. ``draw="exhaustive"`` replaces the random
    draws by the full, probability-weighted randomization distribution.
    """
    if draw == "exhaustive":
        if regenerate_po:
            raise DomainError("exhaustive draws need a fixed table")
        return _exhaustive_mc(source, estimators, seed)
    if draw != "random":
        raise DomainError(f"unknown draw mode {draw!r}")
    if reps < 2:
        raise DomainError("reps must be >= 2")
    names = list(estimators)
    points = np.empty((reps, len(names)))
    nominal = np.empty((reps, len(names)))
    truth = np.empty(reps)
    resamples = 0
    for r in range(reps):
        po = source(_rep_seed(seed, r)) if regenerate_po else source
        attempt = 0
        while True:
            rng = np.random.default_rng((int(seed) & 0xFFFFFFFFFFFFFFFF, r, attempt))
            a = _draw_assignment(po, rng)
            try:
                exp = po.realize(a)
                est_seed = _rep_seed(seed, r)
                row = [estimators[name](exp, est_seed) for name in names]
            except LoopError:
                attempt += 1
                resamples += 1
                if resamples > max_resamples:
                    raise
                continue
            break
        points[r] = [v[0] for v in row]
        nominal[r] = [v[1] for v in row]
        truth[r] = po.tau_bar
    out = {}
    for j, name in enumerate(names):
        err = points[:, j] - truth
        true_se = float(np.std(err if regenerate_po else points[:, j], ddof=1))
        out[name] = EstimatorSummary(
            bias=float(err.mean()),
            mc_se=float(np.std(err, ddof=1) / math.sqrt(reps)),
            mean_nominal_se=float(np.sqrt(np.maximum(nominal[:, j], 0.0)).mean()),
            true_se=true_se,
            reps=reps,
        )
    return MonteCarloSummary(out, reps, seed, resamples, draw)


def _exhaustive_mc(po: PotentialOutcomesTable, estimators, seed):
    assignments, probs = assignment_support(po)
    names = list(estimators)
    points = np.empty((len(assignments), len(names)))
    nominal = np.empty_like(points)
    ok = np.ones(len(assignments), dtype=bool)
    for s, a in enumerate(assignments):
        try:
            exp = po.realize(a)
            row = [estimators[name](exp, seed) for name in names]
        except LoopError:
            ok[s] = False
            continue
        points[s] = [v[0] for v in row]
        nominal[s] = [v[1] for v in row]
    w = probs[ok] / probs[ok].sum()
    out = {}
    for j, name in enumerate(names):
        x = points[ok, j]
        mean = float(w @ x)
        var = float(w @ (x - mean) ** 2)
        out[name] = EstimatorSummary(
            bias=mean - po.tau_bar,
            mc_se=0.0,
            mean_nominal_se=float(w @ np.sqrt(np.maximum(nominal[ok, j], 0.0))),
            true_se=math.sqrt(var),
            reps=int(ok.sum()),
        )
    return MonteCarloSummary(out, int(ok.sum()), seed, int((~ok).sum()), "exhaustive")


def simulation1(reps: int = 10_000, seed: int = 0, estimators=None,
                n_trees: int = 500) -> MonteCarloSummary:
    """Fixed three-group table (drawn once from ``seed``), ``reps`` random assignments."""
    po = gen_sim1(seed)
    if estimators is None:
        estimators = default_estimators(n_trees=n_trees)
    return monte_carlo(po, estimators, reps, regenerate_po=False, seed=seed)


SIM2_DEFAULTS = {"n_units": 200, "k": 50, "c": 3.0}
SIM2_GRIDS = {
    "k": (5, 25, 50, 100),
    "n_units": (100, 300, 600, 1000),
    "c": (1.0, 2.0, 3.0, 4.5),
}


@dataclass(frozen=True)
class SweepRow:
    axis: str
    value: float
    estimator: str
    bias: float
    mc_se: float
    mean_nominal_se: float
    true_se: float
    rel_true_se: float  # true SE relative to the simple difference at the same point
    reps: int
    resamples: int
    seed: int


def simulation2_sweep(axis: str, values: Sequence = None, reps: int = 200, seed: int = 0,
                      estimators=None, n_trees: int = 500, **fixed) -> list:
    """Vary one of ``k``, ``n_units`` or ``c`` with the others held fixed.

    Each grid point gets one table drawn from a seed keyed by ``(seed, point)``;
    true SEs are indexed to the simple difference estimator at that point.
    """
    if axis not in SIM2_GRIDS:
        raise DomainError(f"unknown sweep axis {axis!r}")
    if values is None:
        values = SIM2_GRIDS[axis]
    if estimators is None:
        estimators = default_estimators(n_trees=n_trees)
    if "simple_difference" not in estimators:
        raise DomainError("the sweep indexes results to the simple_difference estimator")
    settings = {**SIM2_DEFAULTS, **fixed}
    rows = []
    for point, value in enumerate(values):
        args = {**settings, axis: value}
        point_seed = _rep_seed(seed, 1_000_000 + point)
        po = gen_sim2(int(args["n_units"]), int(args["k"]), float(args["c"]), point_seed)
        summary = monte_carlo(po, estimators, reps, seed=point_seed)
        base = summary.estimators["simple_difference"].true_se
        for name, s in summary.estimators.items():
            rows.append(SweepRow(axis, float(value), name, s.bias, s.mc_se, s.mean_nominal_se,
                                 s.true_se, s.true_se / base if base > 0 else float("nan"),
                                 s.reps, summary.resamples, point_seed))
    return rows
