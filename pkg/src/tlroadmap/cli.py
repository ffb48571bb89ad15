"""Command-line entry point: ``tlroadmap <command> --config run.toml --out dir``.

Exit codes: 0 success, 1 usage or configuration problem, 2 validation failure,
3 identification concern (empty positivity cells), 4 estimation failure.
"""

from __future__ import annotations

import argparse
import os
import sys
import warnings
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from . import report as rpt
from .config import ConfigError, RunConfig, load_config
from .data_model import (
    DataError,
    Dataset,
    Issue,
    ValidationReport,
    complete_cases,
    cut_column,
    dichotomize_treatment,
    load_dataset,
    recode_categories,
    validate,
)
from .diagnostics import crude_dose_table, overlap_summary, positivity_table
from .sensitivity import causal_gap_curve, default_grid
from .simulation import ReplicationError, replicate_study
from .super_learner import make_folds
from .tmle import EstimationError, estimate, fit_nuisances, parametric_baseline

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_VALIDATION = 2
EXIT_IDENTIFICATION = 3
EXIT_ESTIMATION = 4

THREADS_ENV = "TLROADMAP_THREADS"
RECODE_HINT = (
    "some strata contain only treated or only untreated subjects; merge sparse categories "
    "with a [[recode]] section (or coarser [[derive]] edges) and re-run before estimating"
)


class UsageError(Exception):
    pass


class Run:
    """State shared by the commands: config, output directory, report under construction."""

    def __init__(self, command: str, args: argparse.Namespace, argv: list[str]):
        self.command = command
        self.argv = argv
        self.cfg: RunConfig | None = None
        if args.config is not None:
            self.cfg = load_config(args.config)
            if args.seed is not None:
                self.cfg = replace(self.cfg, seed=args.seed)
                if self.cfg.simulation is not None:
                    self.cfg = replace(self.cfg, simulation=replace(self.cfg.simulation, seed=args.seed))
        out = args.out or (self.cfg.output_dir if self.cfg is not None else None)
        if out is None:
            raise UsageError("no output directory: pass --out or set [output] dir")
        self.out = Path(out)
        self.threads = _threads(args.threads)
        echo = self.cfg.echo() if self.cfg is not None else {}
        seed = self.cfg.seed if self.cfg is not None else None
        self.report = rpt.new_report(command, seed, echo, __version__)

    def finish(self, code: int, messages: list[str] | None = None) -> int:
        self.report["exit_code"] = code
        rpt.write_json(self.out / rpt.REPORT_NAME, self.report)
        rpt.write_json(self.out / rpt.METADATA_NAME, rpt.metadata(self.command, self.argv))
        for m in messages or ():
            print(m, file=sys.stderr)
        return code


def _threads(flag: int | None) -> int:
    if flag is not None:
        value = flag
    else:
        raw = os.environ.get(THREADS_ENV)
        if raw is None:
            return 1
        try:
            value = int(raw)
        except ValueError:
            raise UsageError(f"{THREADS_ENV} must be an integer, got {raw!r}") from None
    if value < 1:
        raise UsageError(f"thread count must be >= 1, got {value}")
    return value


# ---------------------------------------------------------------------------
# shared pipeline stages


def _prepare(cfg: RunConfig) -> Dataset:
    """Load the data and apply derivations, recodes and dose dichotomization."""
    if cfg.data_path is None:
        raise ConfigError("no [data] section in the configuration")
    if not cfg.data_path.is_file():
        raise ConfigError(f"data file not found: {cfg.data_path}")
    ds = load_dataset(cfg.data_path, cfg.columns)
    for d in cfg.derive:
        ds = cut_column(ds, d.column, d.edges, d.labels, d.name)
    for r in cfg.recode:
        ds = recode_categories(ds, r.column, r.mapping)
    if cfg.dose_column is not None:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            ds = dichotomize_treatment(ds, cfg.dose_column, cfg.treatment_name)
    if cfg.treatment_column is not None and ds.treatment != cfg.treatment_column:
        raise ConfigError(f"treatment.column {cfg.treatment_column!r} does not name the column with role 'treatment'")
    return ds


def _validation_columns(cfg: RunConfig) -> list[str]:
    cols = list(cfg.adjustment_set)
    for c in cfg.g_adjustment_set or ():
        if c not in cols:
            cols.append(c)
    return cols


def _early_steps(run: Run, ds: Dataset | None) -> None:
    cfg = run.cfg
    rpt.set_step(run.report, "0_question", question=cfg.question or None)
    if ds is None:
        return
    rpt.set_step(
        run.report,
        "1_statistical_model",
        model="nonparametric: no restrictions on the joint distribution of (W, A, Y)",
        n_rows=ds.n,
        outcome=ds.outcome,
        treatment=ds.treatment,
        dose=ds.dose,
        adjustment_set=list(cfg.adjustment_set),
        columns=[s.__dict__.copy() for s in ds.specs],
    )
    rpt.set_step(
        run.report,
        "2_causal_estimand",
        estimand="risk difference E[Y(1)] - E[Y(0)]",
        secondary=["risk ratio E[Y(1)] / E[Y(0)]", "odds ratio"],
        identifying_assumptions=["consistency", "no unmeasured confounding given the adjustment set", "positivity"],
    )


def _validate(run: Run) -> tuple[Dataset | None, ValidationReport, list[str]]:
    """Run data preparation and validation; failures are recorded as issues."""
    cfg = run.cfg
    try:
        ds = _prepare(cfg)
    except DataError as exc:
        vr = ValidationReport(errors=(Issue("DATA_ERROR", None, str(exc)),))
        return None, vr, [f"data error: {exc}"]
    vr = validate(ds, _validation_columns(cfg))
    msgs = [f"{i.code}: {i.message}" for i in vr.errors]
    return ds, vr, msgs


def _identification(run: Run, ds: Dataset, vr: ValidationReport) -> tuple[list, list[str]]:
    cfg = run.cfg
    tables, rows, zero, notes = [], [], [], []
    for s in cfg.stratifiers:
        try:
            t = positivity_table(ds, s)
        except DataError as exc:
            raise ConfigError(f"analysis.stratifiers: {exc}") from None
        tables.append({"stratifier": s, "cells": [c.__dict__.copy() for c in t.cells], "zero_cells": list(t.zero_cells)})
        rows.extend(t.to_rows())
        zero.extend(f"{s}={lvl}" for lvl in t.zero_cells)
    if not cfg.stratifiers:
        notes.append("no stratifiers checked")
    rpt.write_csv(run.out / "positivity.csv", rows, ["stratifier", "level", "n_control", "n_treated"])
    dose_rows = None
    if ds.dose is not None:
        dose_rows = [b.__dict__.copy() for b in crude_dose_table(ds, ds.dose, cfg.dose_bins)]
        rpt.write_csv(run.out / "dose_table.csv", dose_rows, ["label", "lower", "upper", "n", "events", "proportion"])
    section = rpt.set_step(
        run.report,
        "3_identification",
        status="ok" if not zero else "concern",
        validation=vr.to_dict(),
        positivity=tables,
        zero_cells=zero,
        crude_dose_table=dose_rows,
        notes=notes,
    )
    if zero:
        section["remediation"] = RECODE_HINT
    return zero, notes


def _estimate(run: Run, ds: Dataset) -> dict:
    """Super-learner nuisances, TMLE, PS diagnostics; returns the tmle block."""
    cfg = run.cfg
    data = complete_cases(ds, _validation_columns(cfg))
    try:
        folds = make_folds(
            data.n, cfg.V, cfg.seed, stratify=data.Y if cfg.stratify else None, stratify_name=data.outcome if cfg.stratify else None
        )
    except ValueError as exc:
        raise UsageError(f"fold construction: {exc}") from None
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        nuis = fit_nuisances(
            data, cfg.adjustment_set, cfg.q_library, cfg.g_library, folds, cfg.g_bound, cfg.q_bound, cfg.loss, cfg.g_adjustment_set, run.threads
        )
        try:
            result = estimate(data, nuis)
        except EstimationError as exc:
            raise EstimationError(f"targeting step failed: {exc}") from exc
        baseline = parametric_baseline(data, cfg.baseline_terms, data.dose) if (cfg.baseline_terms or data.dose) else None
    notes = sorted({str(w.message) for w in caught})
    overlap = overlap_summary(nuis.g_raw, data.A)

    tmle = result.to_dict()
    rpt.set_step(
        run.report,
        "4_estimation",
        n_analysis=data.n,
        rows_dropped=ds.n - data.n,
        folds={"V": folds.V, "seed": folds.seed, "stratified_on": folds.stratified_on},
        tmle=tmle,
        propensity_overlap={k: v for k, v in overlap.to_dict().items() if k != "bins"},
        parametric_baseline=None if baseline is None else {"terms": baseline.to_rows(), "converged": baseline.converged, "warnings": list(baseline.warnings)},
        warnings=notes,
    )
    rpt.write_csv(run.out / "ps_overlap.csv", overlap.to_rows(), ["bin_lower", "bin_upper", "n_control", "n_treated"])
    sl_rows = [{"nuisance": "Q", **r} for r in nuis.q_fit.summary()] + [{"nuisance": "g", **r} for r in nuis.g_fit.summary()]
    rpt.write_csv(run.out / "sl_weights.csv", sl_rows, ["nuisance", "learner", "weight", "cv_risk", "dropped"])
    ic = result.ic["rd"]
    rpt.write_csv(
        run.out / "influence_curve.csv",
        [{"row": i + 1, "ic_rd": float(v), "g": float(gv)} for i, (v, gv) in enumerate(zip(ic, nuis.g))],
        ["row", "ic_rd", "g"],
    )
    return tmle


def _sensitivity(run: Run, psi: float, se: float, ci) -> None:
    cfg = run.cfg
    grid = None
    if cfg is not None and cfg.sensitivity_grid is not None:
        grid = cfg.sensitivity_grid
    elif cfg is not None:
        grid = default_grid(psi, se, cfg.sensitivity_points)
    curve = causal_gap_curve(psi, se, ci, grid)
    rpt.write_csv(run.out / "sensitivity.csv", curve.to_rows(), ["delta", "delta_se_units", "estimate", "lower", "upper"])
    rpt.set_step(
        run.report,
        "5_interpretation",
        psi_rd=curve.psi,
        se_rd=curve.se,
        ci95_rd=list(curve.ci),
        thresholds=curve.thresholds(),
        grid_points=len(curve.rows),
        reading=curve.describe(),
    )


# ---------------------------------------------------------------------------
# commands


def _run_through_identification(run: Run, allow_concern: bool):
    """Shared prefix of validate/diagnose/estimate. Returns (dataset, exit code or None)."""
    ds, vr, msgs = _validate(run)
    _early_steps(run, ds)
    if not vr.ok:
        rpt.set_step(run.report, "3_identification", status="failed", validation=vr.to_dict())
        rpt.mark_downstream(run.report, "3_identification", "validation failed")
        return ds, run.finish(EXIT_VALIDATION, msgs)
    if run.command == "validate":
        rpt.set_step(run.report, "3_identification", validation=vr.to_dict())
        rpt.mark_downstream(run.report, "3_identification", "validate only")
        return ds, run.finish(EXIT_OK)
    zero, _ = _identification(run, ds, vr)
    if zero and not allow_concern:
        rpt.mark_downstream(run.report, "3_identification", "positivity concern: empty cells " + ", ".join(zero))
        return ds, run.finish(EXIT_IDENTIFICATION, [f"empty positivity cells: {', '.join(zero)}", f"hint: {RECODE_HINT}"])
    return ds, None


def cmd_validate(run: Run) -> int:
    _, code = _run_through_identification(run, allow_concern=True)
    return code


def cmd_diagnose(run: Run) -> int:
    _, code = _run_through_identification(run, allow_concern=False)
    if code is not None:
        return code
    rpt.mark_downstream(run.report, "3_identification", "diagnose only")
    return run.finish(EXIT_OK)


def _estimate_pipeline(run: Run) -> int | None:
    ds, code = _run_through_identification(run, allow_concern=False)
    if code is not None:
        return code
    try:
        tmle = _estimate(run, ds)
    except EstimationError as exc:
        rpt.set_step(run.report, "4_estimation", status="failed", error=str(exc))
        rpt.mark_downstream(run.report, "4_estimation", "estimation failed")
        return run.finish(EXIT_ESTIMATION, [f"estimation failed: {exc}"])
    _sensitivity(run, tmle["psi_rd"], tmle["se"]["rd"], tmle["ci95"]["rd"])
    return None


def cmd_estimate(run: Run) -> int:
    code = _estimate_pipeline(run)
    return run.finish(EXIT_OK) if code is None else code


def cmd_sensitivity(run: Run, report_path: str | None) -> int:
    if report_path is None:
        if run.cfg is None:
            raise UsageError("sensitivity needs --config or --report")
        code = _estimate_pipeline(run)
        return run.finish(EXIT_OK) if code is None else code
    try:
        prior = rpt.read_report(report_path)
    except (OSError, ValueError) as exc:
        raise UsageError(f"cannot read report {report_path}: {exc}") from None
    try:
        tmle = rpt.estimation_result(prior)
    except KeyError:
        raise UsageError("report has no estimation results: estimate first") from None
    prior["command"] = "sensitivity"
    run.report = prior
    _sensitivity(run, tmle["psi_rd"], tmle["se"]["rd"], tmle["ci95"]["rd"])
    return run.finish(EXIT_OK)


def cmd_simulate(run: Run) -> int:
    sim = run.cfg.simulation
    if sim is None:
        raise UsageError("simulate needs a [dgp] section and a [simulate] section")
    try:
        summary = replicate_study(sim.dgp, sim.n, sim.reps, sim.estimators, sim.seed, sim.truth, sim.mc_size, run.threads)
    except ReplicationError as exc:
        print(f"replicate failed: {exc}", file=sys.stderr)
        return EXIT_ESTIMATION
    payload = {"schema_version": rpt.SCHEMA_VERSION, "package_version": __version__, **summary.to_dict()}
    rpt.write_json(run.out / "simulation.json", payload)
    rpt.write_csv(
        run.out / "simulation.csv",
        [v.to_dict() for v in summary.estimators.values()],
        ["name", "kind", "reps", "mean_estimate", "mean_bias", "sd", "mean_se", "coverage", "mean_ci_width", "max_abs_ic_mean"],
    )
    rpt.write_json(run.out / rpt.METADATA_NAME, rpt.metadata("simulate", run.argv))
    for v in summary.estimators.values():
        cov = "" if v.coverage is None else f"  coverage {v.coverage:.3f}"
        print(f"{v.name:>16s}  bias {v.mean_bias:+.5f}{cov}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tlroadmap", description="Targeted learning roadmap for point-treatment effects.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in (
        ("validate", "check the configuration and data against the column specs"),
        ("diagnose", "outcome-blind positivity tables and crude dose table"),
        ("estimate", "super learner + TMLE with diagnostics and sensitivity curve"),
        ("sensitivity", "causal-gap sensitivity curve (inline run or from a prior report)"),
        ("simulate", "Monte Carlo study against a known data-generating process"),
    ):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=name != "sensitivity", help="TOML run configuration")
        p.add_argument("--out", help="output directory (overrides [output] dir)")
        p.add_argument("--seed", type=int, help="override the configured seed")
        p.add_argument("--threads", type=int, help=f"worker count (default: ${THREADS_ENV} or 1)")
        if name == "sensitivity":
            p.add_argument("--report", help="prior report.json to read the estimate from")
    return parser


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    np.seterr(all="ignore")
    try:
        run = Run(args.command, args, argv)
        if args.command == "validate":
            return cmd_validate(run)
        if args.command == "diagnose":
            return cmd_diagnose(run)
        if args.command == "estimate":
            return cmd_estimate(run)
        if args.command == "sensitivity":
            return cmd_sensitivity(run, args.report)
        return cmd_simulate(run)
    except (ConfigError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
