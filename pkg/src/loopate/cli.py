"""Command line interface: ``estimate``, ``simulate`` and ``oracle``.

Flags are the kebab-case spellings of :class:`RunConfig` fields; ``--config``
reads a JSON document with the same (snake_case) names, and explicit flags win.
Input files are comma-separated UTF-8 with a header row. Categorical
covariates must be encoded numerically beforehand.

Exit codes: 0 success, 2 validation error, 3 runtime error. Failures print a
JSON error document on stderr and remove any outputs already written.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys
import tempfile
from dataclasses import asdict, dataclass, fields
from typing import List, Optional

import numpy as np

from .core import Bernoulli, Blocked, CompleteRandomization, Experiment, Paired, loop_estimate
from .designs import loop_with_random_drop
from .errors import (DomainError, InputError, LoopError, MissingColumn, MissingValues,
                     NonBinaryTreatment, NonConstantP, ParseError, ProbabilityOutOfRange)
from .forest import ForestParams
from .imputers import ForestImputer, MeanImputer, OlsImputer, StrataImputer
from .oracle_sim import (PotentialOutcomesTable, default_estimators, enumerate_oracle,
                         drop_averaged_imputation, randomization_expectation, simulation1,
                         simulation2_sweep)
from .variance import gamma_bar_hat, mse_hats, variance_bound, variance_with_gamma

SCHEMA_VERSION = 1
MISSING_TOKENS = {"", "na", "nan", "null"}


@dataclass
class RunConfig:
    command: str = "estimate"
    input: Optional[str] = None
    outcome: str = "y"
    treatment: str = "t"
    probability_column: Optional[str] = None
    p: Optional[float] = None
    covariates: Optional[List[str]] = None
    imputer: str = "mean"
    strata_column: Optional[str] = None
    fallback: Optional[float] = None
    forest_mode: str = "oob"
    n_trees: int = 500
    min_node_size: int = 5
    mtry: Optional[int] = None
    max_depth: Optional[int] = None
    n_jobs: int = 1
    seed: int = 0
    design: str = "bernoulli"
    block_column: Optional[str] = None
    random_drop: str = "auto"
    drop_reps: int = 100
    denominator: str = "sample"
    gamma: bool = False
    pair_budget: Optional[int] = None
    ci_level: float = 0.95
    per_unit: bool = False
    output: Optional[str] = None
    table: Optional[str] = None
    svg: Optional[str] = None
    # simulate
    sim: int = 1
    reps: int = 1000
    axis: str = "k"
    values: Optional[List[float]] = None
    k: int = 50
    n_units: int = 200
    c: float = 3.0
    # oracle
    treated_outcome: str = "y1"
    control_outcome: str = "y0"
    n_treated: Optional[int] = None

    def validate(self) -> None:
        if self.command not in ("estimate", "simulate", "oracle"):
            raise DomainError(f"unknown command {self.command!r}")
        if self.command != "simulate" and not self.input:
            raise DomainError("an input file is required")
        if self.command != "simulate" and (self.probability_column is None) == (self.p is None):
            raise DomainError("give exactly one of probability-column and p")
        if not 0 < self.ci_level < 1:
            raise DomainError("ci-level must lie in (0, 1)")
        for name, allowed in (("imputer", ("mean", "strata", "ols", "forest")),
                              ("design", ("bernoulli", "complete", "blocked", "paired")),
                              ("random_drop", ("auto", "none", "sampled", "expectation")),
                              ("denominator", ("sample", "expected")),
                              ("forest_mode", ("oob", "exact_loo"))):
            if getattr(self, name) not in allowed:
                raise DomainError(f"{name} must be one of {allowed}")
        if self.imputer == "strata" and not self.strata_column:
            raise DomainError("the strata imputer needs strata-column")
        if self.design in ("blocked", "paired") and not self.block_column:
            raise DomainError(f"the {self.design} design needs block-column")


# ---------------------------------------------------------------------------
# input
# ---------------------------------------------------------------------------


def _read_rows(path):
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise InputError(f"{path} is empty") from None
        rows = [r for r in reader if r]
    for n, r in enumerate(rows, start=1):
        if len(r) != len(header):
            raise ParseError(n, None, ",".join(r))
    return header, rows


def _is_missing(v: str) -> bool:
    return v.strip().lower() in MISSING_TOKENS


def _parse_float(v, row, column):
    try:
        x = float(v)
    except ValueError:
        raise ParseError(row, column, v) from None
    if not math.isfinite(x):
        raise ParseError(row, column, v)
    return x


def _column_values(header, rows, name):
    if name not in header:
        raise MissingColumn(name)
    j = header.index(name)
    return [r[j] for r in rows]


def _numeric(header, rows, name):
    return np.array([_parse_float(v, n, name)
                     for n, v in enumerate(_column_values(header, rows, name), start=1)])


def _default_covariates(header, rows, used):
    out = []
    for name in header:
        if name in used:
            continue
        try:
            [float(v) for v in _column_values(header, rows, name) if not _is_missing(v)]
        except ValueError:
            continue
        out.append(name)
    return out


def _load_table(path, config: RunConfig, required):
    header, rows = _read_rows(path)
    used = [c for c in required + [config.probability_column, config.strata_column,
                                   config.block_column] if c]
    for name in used:
        if name not in header:
            raise MissingColumn(name)
    covariates = (config.covariates if config.covariates is not None
                  else _default_covariates(header, rows, used))
    columns = used + list(covariates)
    missing = [n for n, r in enumerate(rows, start=1)
               if any(_is_missing(r[header.index(c)]) for c in columns if c in header)]
    if missing:
        raise MissingValues(missing)
    z = (np.column_stack([_numeric(header, rows, c) for c in covariates])
         if covariates else np.zeros((len(rows), 0)))
    if config.probability_column:
        p = _numeric(header, rows, config.probability_column)
    else:
        p = np.full(len(rows), float(config.p))
    for n, v in enumerate(p, start=1):
        if not 0 < v < 1:
            raise ProbabilityOutOfRange(n, v)
    return header, rows, z, p, list(covariates)


def _labels(header, rows, name):
    raw = _column_values(header, rows, name)
    try:
        return np.array([float(v) for v in raw])
    except ValueError:
        return np.array(raw)


def _design(config: RunConfig, header, rows, t):
    if config.design == "bernoulli":
        return Bernoulli()
    if config.design == "complete":
        return CompleteRandomization(int(config.n_treated if config.n_treated is not None
                                         else t.sum()))
    labels = _labels(header, rows, config.block_column)
    return Blocked(labels) if config.design == "blocked" else Paired(labels)


def _treatment(header, rows, name):
    out = []
    for n, v in enumerate(_column_values(header, rows, name), start=1):
        try:
            x = float(v)
        except ValueError:
            raise NonBinaryTreatment(n, v) from None
        if x not in (0.0, 1.0):
            raise NonBinaryTreatment(n, v)
        out.append(int(x))
    return np.array(out, dtype=np.int8)


def read_experiment(path, config: RunConfig) -> Experiment:
    """Parse and validate an experiment file (1-based data row numbers in errors)."""
    header, rows, z, p, _ = _load_table(path, config, [config.outcome, config.treatment])
    t = _treatment(header, rows, config.treatment)
    y = _numeric(header, rows, config.outcome)
    return Experiment(y, t, z, p, _design(config, header, rows, t))


def read_potential_outcomes(path, config: RunConfig):
    """Potential-outcome table and the strata labels (``None`` without strata-column)."""
    header, rows, z, p, _ = _load_table(path, config,
                                        [config.treated_outcome, config.control_outcome])
    t = _numeric(header, rows, config.treated_outcome)
    c = _numeric(header, rows, config.control_outcome)
    if config.design == "complete":
        if config.n_treated is None:
            raise DomainError("the complete design needs n-treated for the oracle")
        design = CompleteRandomization(int(config.n_treated))
    elif config.design == "bernoulli":
        design = Bernoulli()
    else:
        raise DomainError("the oracle supports the bernoulli and complete designs")
    strata = _labels(header, rows, config.strata_column) if config.strata_column else None
    return PotentialOutcomesTable(t, c, z, p, design), strata


# ---------------------------------------------------------------------------
# output
# ---------------------------------------------------------------------------


class _Outputs:
    """Atomic writers that remember what they wrote so a failure can undo it."""

    def __init__(self):
        self.written = []

    def write(self, path, text: str) -> None:
        directory = os.path.dirname(os.path.abspath(path))
        fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=".part")
        try:
            with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
                fh.write(text)
            os.replace(tmp, path)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise
        self.written.append(path)

    def rollback(self) -> None:
        for path in self.written:
            try:
                os.unlink(path)
            except OSError:
                pass
        self.written = []


def _num(x):
    """Float for JSON; non-finite values become ``None`` so reports stay valid JSON."""
    if x is None:
        return None
    x = float(x)
    return x if math.isfinite(x) else None


def _csv_text(header, rows) -> str:
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(_cell(v) for v in row))
    return "\n".join(lines) + "\n"


def _cell(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v)) if math.isfinite(v) else ""
    if v is None:
        return ""
    return str(v)


def _json_text(doc) -> str:
    return json.dumps(doc, indent=2, sort_keys=True, allow_nan=False) + "\n"


def svg_lines(series: dict, x_label: str, y_label: str, width=480, height=320) -> str:
    """Minimal line chart: one polyline per series, axis labels only."""
    pad = 50
    xs = [x for pts in series.values() for x, _ in pts]
    ys = [y for pts in series.values() for _, y in pts if math.isfinite(y)]
    x0, x1 = min(xs), max(xs)
    y0, y1 = min(ys + [0.0]), max(ys + [1.0])
    sx = (width - 2 * pad) / ((x1 - x0) or 1.0)
    sy = (height - 2 * pad) / ((y1 - y0) or 1.0)
    colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#8c564b"]
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
             f'<line x1="{pad}" y1="{height - pad}" x2="{width - pad}" y2="{height - pad}" stroke="black"/>',
             f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{height - pad}" stroke="black"/>',
             f'<text x="{width / 2}" y="{height - 12}" text-anchor="middle">{x_label}</text>',
             f'<text x="14" y="{height / 2}" transform="rotate(-90 14 {height / 2})" '
             f'text-anchor="middle">{y_label}</text>']
    for n, (name, pts) in enumerate(series.items()):
        coords = " ".join(f"{pad + (x - x0) * sx:.2f},{height - pad - (y - y0) * sy:.2f}"
                          for x, y in pts if math.isfinite(y))
        color = colors[n % len(colors)]
        parts.append(f'<polyline fill="none" stroke="{color}" points="{coords}"/>')
        parts.append(f'<text x="{width - pad + 4}" y="{pad + 14 * n}" fill="{color}" '
                     f'font-size="11">{name}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def _forest_params(config: RunConfig) -> ForestParams:
    return ForestParams(config.n_trees, config.min_node_size, config.mtry, config.max_depth,
                        config.seed)


def build_imputer(config: RunConfig, strata_labels=None):
    if config.imputer == "mean":
        return MeanImputer(config.fallback)
    if config.imputer == "strata":
        return StrataImputer(strata_labels, config.fallback)
    if config.imputer == "ols":
        return OlsImputer()
    return ForestImputer(_forest_params(config), config.forest_mode, config.fallback,
                         config.n_jobs)


def _estimate(config: RunConfig, out: _Outputs) -> dict:
    exp = read_experiment(config.input, config)
    strata = None
    if config.imputer == "strata":
        header, rows = _read_rows(config.input)
        strata = _labels(header, rows, config.strata_column)
    imputer = build_imputer(config, strata)
    flags = []
    want_variance = exp.constant_p() is not None
    if not want_variance:
        flags.append("variance_rejected_nonconstant_p")
    drop = config.random_drop
    if drop == "auto":
        drop = "none" if isinstance(exp.design, Bernoulli) else "sampled"
    if drop == "none":
        imputed = imputer.impute(exp)
        report = loop_estimate(exp, imputed, config.ci_level, want_variance,
                               config.denominator)
        if not isinstance(exp.design, Bernoulli):
            flags.append("dependent_design_without_random_drop")
    else:
        report = loop_with_random_drop(exp, imputer, config.drop_reps, config.seed, drop,
                                       config.ci_level, want_variance, config.denominator)
    flags.extend(report.caveats)
    result = {
        "tau_hat": _num(report.tau_hat),
        "var_hat": _num(report.var_hat),
        "se": _num(report.se),
        "ci": None if report.ci is None else [_num(v) for v in report.ci],
        "ci_level": config.ci_level,
        "m_t_hat": _num(report.m_t_hat),
        "m_c_hat": _num(report.m_c_hat),
        "n_units": exp.n_units,
        "n_treated": report.n_treated,
        "n_control": report.n_control,
        "imputer": report.imputer_id,
        "random_drop": drop,
        "drop_mc_se": _num(report.drop_mc_se),
    }
    if config.gamma:
        if not want_variance:
            raise NonConstantP("the covariance diagnostic needs a constant p")
        budget = "all" if config.pair_budget is None else config.pair_budget
        diag = gamma_bar_hat(exp, imputer, budget, config.seed)
        result["gamma"] = {
            "gamma_bar_hat": _num(diag.gamma_bar_hat),
            "pairs": int(len(diag.pairs)),
            "refits": diag.refits,
            "var_with_gamma": _num(variance_with_gamma(report.var_hat, diag.gamma_bar_hat,
                                                       exp.n_units)),
        }
    if config.per_unit:
        result["tau_units"] = [_num(v) for v in report.tau_units]
    if config.table:
        out.write(config.table, _csv_text(["unit", "tau_unit"],
                                          [(i + 1, float(v)) for i, v in
                                           enumerate(report.tau_units)]))
    se = "n/a" if report.se is None else f"{report.se:.6g}"
    summary = (f"tau_hat={report.tau_hat:.6g} se={se} n_treated={report.n_treated} "
               f"n_control={report.n_control} imputer={report.imputer_id}")
    return {"result": result, "flags": sorted(set(flags)), "summary": summary}


SIM1_COLUMNS = ["estimator", "bias", "mc_se", "mean_nominal_se", "true_se", "reps",
                "resamples", "seed"]
SWEEP_COLUMNS = ["axis", "value", "estimator", "bias", "mc_se", "mean_nominal_se", "true_se",
                 "rel_true_se", "reps", "resamples", "seed"]


def _simulate(config: RunConfig, out: _Outputs) -> dict:
    estimators = default_estimators(n_trees=config.n_trees, min_node_size=config.min_node_size)
    flags = []
    if config.sim == 1:
        summary = simulation1(config.reps, config.seed, estimators)
        rows = [(name, s.bias, s.mc_se, s.mean_nominal_se, s.true_se, s.reps,
                 summary.resamples, config.seed) for name, s in summary.estimators.items()]
        if summary.resamples:
            flags.append(f"resampled_assignments:{summary.resamples}")
        result = {name: {"bias": _num(s.bias), "mc_se": _num(s.mc_se),
                         "mean_nominal_se": _num(s.mean_nominal_se),
                         "true_se": _num(s.true_se), "reps": s.reps}
                  for name, s in summary.estimators.items()}
        if config.table:
            out.write(config.table, _csv_text(SIM1_COLUMNS, rows))
        text = " ".join(f"{n}:bias={r['bias']:.4g},true_se={r['true_se']:.4g}"
                        for n, r in result.items())
        return {"result": result, "flags": flags, "summary": text}
    if config.sim != 2:
        raise DomainError("sim must be 1 or 2")
    fixed = {"k": config.k, "n_units": config.n_units, "c": config.c}
    fixed.pop(config.axis, None)
    sweep = simulation2_sweep(config.axis, config.values, config.reps, config.seed,
                              estimators, **fixed)
    rows = [(r.axis, r.value, r.estimator, r.bias, r.mc_se, r.mean_nominal_se, r.true_se,
             r.rel_true_se, r.reps, r.resamples, r.seed) for r in sweep]
    # one resample count per grid point, repeated on each estimator's row
    total_resamples = sum(r.resamples for r in sweep if r.estimator == "simple_difference")
    if total_resamples:
        flags.append(f"resampled_assignments:{total_resamples}")
    if config.table:
        out.write(config.table, _csv_text(SWEEP_COLUMNS, rows))
    if config.svg:
        series = {}
        for r in sweep:
            series.setdefault(r.estimator, []).append((r.value, r.rel_true_se))
        out.write(config.svg, svg_lines(series, config.axis, "true SE / simple difference"))
    result = [{"value": r.value, "estimator": r.estimator, "bias": _num(r.bias),
               "true_se": _num(r.true_se), "rel_true_se": _num(r.rel_true_se)} for r in sweep]
    return {"result": result, "flags": flags,
            "summary": f"sweep over {config.axis}: {len(sweep)} rows"}


ORACLE_COLUMNS = ["imputer", "support_size", "tau_bar", "exact_mean_tau_hat", "bias",
                  "exact_var_tau_hat", "expected_var_bound"]


def _oracle(config: RunConfig, out: _Outputs) -> dict:
    po, strata = read_potential_outcomes(config.input, config)
    fallback = 0.0 if config.fallback is None else config.fallback
    imputers = [MeanImputer(fallback), OlsImputer()]
    if strata is not None:
        imputers.insert(1, StrataImputer(strata, fallback))
    random_drop = not isinstance(po.design, Bernoulli)
    p = float(po.p[0]) if np.all(po.p == po.p[0]) else None
    rows, result = [], []
    for imp in imputers:
        summary = enumerate_oracle(po, imp, random_drop=random_drop)

        def bound(exp, imp=imp):
            imputed = drop_averaged_imputation(exp, imp) if random_drop else imp.impute(exp)
            m_t, m_c = mse_hats(exp, imputed, "expected")
            return variance_bound(m_t, m_c, p, exp.n_units)

        expected_bound = float(randomization_expectation(po, bound)) if p is not None else None
        row = (imp.id, summary.support_size, po.tau_bar, summary.mean_tau_hat,
               summary.mean_tau_hat - po.tau_bar, summary.var_tau_hat, expected_bound)
        rows.append(row)
        result.append(dict(zip(ORACLE_COLUMNS, [row[0], row[1]] + [_num(v) for v in row[2:]])))
    if config.table:
        out.write(config.table, _csv_text(ORACLE_COLUMNS, rows))
    flags = ["random_drop_enumerated"] if random_drop else []
    return {"result": result, "flags": flags,
            "summary": f"oracle over {result[0]['support_size']} assignments, "
                       f"max |bias| = {max(abs(r['bias']) for r in result):.3g}"}


COMMANDS = {"estimate": _estimate, "simulate": _simulate, "oracle": _oracle}


def run(config: RunConfig, stdout=None) -> int:
    """Execute ``config``; returns the exit status and writes the JSON report."""
    stdout = sys.stdout if stdout is None else stdout
    out = _Outputs()
    try:
        config.validate()
        payload = COMMANDS[config.command](config, out)
        doc = {
            "schema_version": SCHEMA_VERSION,
            "command": config.command,
            "seed": config.seed,
            "config": asdict(config),
            "flags": payload["flags"],
            "result": payload["result"],
        }
        if config.output:
            out.write(config.output, _json_text(doc))
        print(payload["summary"], file=stdout)
        return 0
    except Exception as err:  # noqa: BLE001 - every failure maps to an exit code
        out.rollback()
        code = 2 if isinstance(err, (ValueError, OSError)) else 3
        error = {"schema_version": SCHEMA_VERSION, "error": type(err).__name__,
                 "message": str(err), "exit_code": code}
        for attr in ("row", "column", "rows", "unit", "assignment"):
            if hasattr(err, attr):
                error[attr] = getattr(err, attr)
        print(json.dumps(error, sort_keys=True, default=str), file=sys.stderr)
        return code


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def _csv_list(text):
    return [s.strip() for s in text.split(",") if s.strip()]


def _float_list(text):
    return [float(s) for s in _csv_list(text)]


def _add_common(sp):
    sp.add_argument("--config", help="JSON file with RunConfig fields")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--output", help="JSON report path")
    sp.add_argument("--table", help="CSV table path")
    sp.add_argument("--n-trees", type=int)
    sp.add_argument("--min-node-size", type=int)


def _add_data(sp):
    sp.add_argument("--input", help="CSV file")
    sp.add_argument("--probability-column")
    sp.add_argument("--p", type=float, help="constant treatment probability")
    sp.add_argument("--covariates", type=_csv_list,
                    help="comma-separated names (default: remaining numeric columns)")
    sp.add_argument("--strata-column")
    sp.add_argument("--fallback", type=float)
    sp.add_argument("--design", choices=["bernoulli", "complete", "blocked", "paired"])
    sp.add_argument("--block-column")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="loopate", description="LOOP treatment-effect estimates")
    sub = parser.add_subparsers(dest="command", required=True)

    est = sub.add_parser("estimate", help="estimate the average treatment effect")
    _add_common(est)
    _add_data(est)
    est.add_argument("--outcome")
    est.add_argument("--treatment")
    est.add_argument("--imputer", choices=["mean", "strata", "ols", "forest"])
    est.add_argument("--forest-mode", choices=["oob", "exact_loo"])
    est.add_argument("--mtry", type=int)
    est.add_argument("--max-depth", type=int)
    est.add_argument("--n-jobs", type=int)
    est.add_argument("--random-drop", choices=["auto", "none", "sampled", "expectation"])
    est.add_argument("--drop-reps", type=int)
    est.add_argument("--denominator", choices=["sample", "expected"])
    est.add_argument("--gamma", action="store_true", default=None,
                     help="add the pairwise covariance diagnostic")
    est.add_argument("--pair-budget", type=int)
    est.add_argument("--ci-level", type=float)
    est.add_argument("--per-unit", action="store_true", default=None)

    sim = sub.add_parser("simulate", help="run the simulation studies")
    _add_common(sim)
    sim.add_argument("--sim", type=int, choices=[1, 2])
    sim.add_argument("--reps", type=int)
    sim.add_argument("--axis", choices=["k", "n_units", "c"])
    sim.add_argument("--values", type=_float_list)
    sim.add_argument("--k", type=int)
    sim.add_argument("--n-units", type=int)
    sim.add_argument("--c", type=float)
    sim.add_argument("--svg", help="SVG chart of relative true SE")

    orc = sub.add_parser("oracle", help="exact moments by enumerating assignments")
    _add_common(orc)
    _add_data(orc)
    orc.add_argument("--treated-outcome")
    orc.add_argument("--control-outcome")
    orc.add_argument("--n-treated", type=int)
    return parser


def config_from_args(argv=None) -> RunConfig:
    args = vars(build_parser().parse_args(argv))
    merged = {}
    if args.get("config"):
        with open(args["config"], encoding="utf-8") as fh:
            merged.update(json.load(fh))
    merged.update({k: v for k, v in args.items() if v is not None and k != "config"})
    known = {f.name for f in fields(RunConfig)}
    unknown = sorted(set(merged) - known)
    if unknown:
        raise DomainError(f"unknown configuration fields {unknown}")
    config = RunConfig(**merged)
    if config.values is not None:
        config.values = [float(v) for v in config.values]
    return config


def main(argv=None) -> int:
    try:
        config = config_from_args(argv)
    except (LoopError, OSError, json.JSONDecodeError) as err:
        print(json.dumps({"schema_version": SCHEMA_VERSION, "error": type(err).__name__,
                          "message": str(err), "exit_code": 2}), file=sys.stderr)
        return 2
    return run(config)


if __name__ == "__main__":
    sys.exit(main())
