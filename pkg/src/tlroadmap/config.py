"""Run configuration: one TOML file fully determines an analysis or simulation.

Every table is checked for unknown keys before anything is computed. Relative
paths are resolved against the directory holding the configuration file.
"""

from __future__ import annotations

import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

from .data_model import ColumnSpec, DataError
from .diagnostics import DEFAULT_DOSE_EDGES
from .learners import LearnerError, LearnerSpec, Loss, parse_learner
from .sensitivity import DEFAULT_POINTS
from .simulation import Covariate, DgpError, DgpSpec, EstimatorConfig, LogisticModel
from .super_learner import DEFAULT_FOLDS, DEFAULT_SEED
from .tmle import DEFAULT_Q_BOUND

# Library roster used when the configuration does not name one. Boosted stumps
# stand in for BART and spline logistic regression for GAM.
DEFAULT_Q_LIBRARY = ("linear", "boosted_stumps", "lasso_logistic")
DEFAULT_G_LIBRARY = ("logistic", "boosted_stumps", "spline_logistic")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Derivation:
    column: str
    edges: tuple[float, ...]
    labels: tuple[str, ...] | None
    name: str


@dataclass(frozen=True)
class Recode:
    column: str
    mapping: dict[str, str]


@dataclass(frozen=True)
class SimulationConfig:
    dgp: DgpSpec
    n: int
    reps: int
    seed: int
    estimators: tuple[EstimatorConfig, ...]
    truth: float | None = None
    mc_size: int = 1_000_000


@dataclass(frozen=True)
class RunConfig:
    path: Path
    question: str = ""
    data_path: Path | None = None
    columns: tuple[ColumnSpec, ...] = ()
    treatment_column: str | None = None
    dose_column: str | None = None
    treatment_name: str = "treated"
    derive: tuple[Derivation, ...] = ()
    recode: tuple[Recode, ...] = ()
    adjustment_set: tuple[str, ...] = ()
    g_adjustment_set: tuple[str, ...] | None = None
    stratifiers: tuple[str, ...] = ()
    dose_bins: tuple[float, ...] = DEFAULT_DOSE_EDGES
    baseline_terms: tuple[str, ...] = ()
    q_library: tuple[LearnerSpec, ...] = field(default_factory=lambda: tuple(map(parse_learner, DEFAULT_Q_LIBRARY)))
    g_library: tuple[LearnerSpec, ...] = field(default_factory=lambda: tuple(map(parse_learner, DEFAULT_G_LIBRARY)))
    V: int = DEFAULT_FOLDS
    seed: int = DEFAULT_SEED
    loss: Loss = Loss("negative_log_likelihood")
    stratify: bool = True
    g_bound: float | None = None
    q_bound: float = DEFAULT_Q_BOUND
    sensitivity_grid: tuple[float, ...] | None = None
    sensitivity_points: int = DEFAULT_POINTS
    output_dir: Path | None = None
    simulation: SimulationConfig | None = None

    @property
    def has_data(self) -> bool:
        return self.data_path is not None

    def echo(self) -> dict:
        """Settings that determine the analysis, for the report."""
        return {
            "data": None if self.data_path is None else self.data_path.name,
            "treatment": {"column": self.treatment_column, "dose_column": self.dose_column, "name": self.treatment_name},
            "adjustment_set": list(self.adjustment_set),
            "g_adjustment_set": None if self.g_adjustment_set is None else list(self.g_adjustment_set),
            "stratifiers": list(self.stratifiers),
            "q_library": [s.label for s in self.q_library],
            "g_library": [s.label for s in self.g_library],
            "V": self.V,
            "seed": self.seed,
            "loss": self.loss.kind,
            "stratify_folds_on_outcome": self.stratify,
            "g_bound": self.g_bound,
            "q_bound": self.q_bound,
        }


class _Table:
    """Dict wrapper that records which keys were read and rejects the rest."""

    def __init__(self, data: Any, where: str):
        if not isinstance(data, dict):
            raise ConfigError(f"{where}: expected a table")
        self.data = data
        self.where = where
        self.used: set[str] = set()

    def get(self, key, default=None, kind=None):
        self.used.add(key)
        if key not in self.data:
            return default
        value = self.data[key]
        if kind is not None and not isinstance(value, kind) or (kind in (int, float) and isinstance(value, bool)):
            raise ConfigError(f"{self.where}.{key}: expected {getattr(kind, '__name__', kind)}, got {value!r}")
        return value

    def require(self, key, kind=None):
        if key not in self.data:
            raise ConfigError(f"{self.where}: missing required key {key!r}")
        return self.get(key, kind=kind)

    def table(self, key) -> "_Table | None":
        self.used.add(key)
        if key not in self.data:
            return None
        return _Table(self.data[key], f"{self.where}.{key}" if self.where else key)

    def tables(self, key) -> list["_Table"]:
        self.used.add(key)
        items = self.data.get(key, [])
        if not isinstance(items, list):
            raise ConfigError(f"{self.where}.{key}: expected an array of tables")
        return [_Table(x, f"{self.where}.{key}[{i}]" if self.where else f"{key}[{i}]") for i, x in enumerate(items)]

    def done(self):
        extra = sorted(set(self.data) - self.used)
        if extra:
            raise ConfigError(f"{self.where or 'top level'}: unknown keys {extra}")


def _number(x, where):
    if isinstance(x, bool) or not isinstance(x, (int, float)):
        raise ConfigError(f"{where}: expected a number, got {x!r}")
    return float(x)


def _strings(values, where):
    if values is None:
        return None
    if not isinstance(values, list) or not all(isinstance(v, str) for v in values):
        raise ConfigError(f"{where}: expected a list of strings")
    return tuple(values)


def _library(values, where):
    specs = _strings(values, where)
    if specs is None:
        return None
    if not specs:
        raise ConfigError(f"{where}: library is empty")
    try:
        return tuple(parse_learner(s) for s in specs)
    except LearnerError as exc:
        raise ConfigError(f"{where}: {exc}") from None


def _int(t: _Table, key, default):
    value = t.get(key, default)
    if isinstance(value, bool) or not isinstance(value, int):
        raise ConfigError(f"{t.where}.{key}: expected an integer, got {value!r}")
    return value


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    try:
        raw = tomllib.loads(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError(f"cannot read configuration {path}: {exc.strerror or exc}") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return parse_config(raw, path)


def parse_config(raw: dict, path: Path) -> RunConfig:
    base = path.parent
    top = _Table(raw, "")
    kw: dict[str, Any] = {"path": path}
    question = top.get("question", "", str)
    kw["question"] = question

    data = top.table("data")
    if data is not None:
        kw["data_path"] = base / data.require("path", str)
        cols = []
        for t in data.tables("columns"):
            try:
                cols.append(
                    ColumnSpec(
                        t.require("name", str),
                        t.get("role", "covariate", str),
                        t.get("timing", "baseline", str),
                        t.get("kind", "continuous", str),
                    )
                )
            except DataError as exc:
                raise ConfigError(f"{t.where}: {exc}") from None
            t.done()
        if not cols:
            raise ConfigError("data.columns: at least one column spec is required")
        kw["columns"] = tuple(cols)
        data.done()

    trt = top.table("treatment")
    if trt is not None:
        kw["treatment_column"] = trt.get("column", None, str)
        kw["dose_column"] = trt.get("dose_column", None, str)
        kw["treatment_name"] = trt.get("name", "treated", str)
        if kw["treatment_column"] and kw["dose_column"]:
            raise ConfigError("treatment: give either column or dose_column, not both")
        trt.done()

    derived = []
    for t in top.tables("derive"):
        edges = t.require("edges", list)
        labels = _strings(t.get("labels"), f"{t.where}.labels")
        column = t.require("column", str)
        derived.append(
            Derivation(column, tuple(_number(e, f"{t.where}.edges") for e in edges), labels, t.get("name", f"{column}_group", str))
        )
        t.done()
    kw["derive"] = tuple(derived)

    recodes = []
    for t in top.tables("recode"):
        mapping = t.require("mapping", dict)
        if not all(isinstance(v, str) for v in mapping.values()):
            raise ConfigError(f"{t.where}.mapping: values must be strings")
        recodes.append(Recode(t.require("column", str), dict(mapping)))
        t.done()
    kw["recode"] = tuple(recodes)

    an = top.table("analysis")
    if an is not None:
        kw["adjustment_set"] = _strings(an.get("adjustment_set", []), "analysis.adjustment_set")
        kw["g_adjustment_set"] = _strings(an.get("g_adjustment_set"), "analysis.g_adjustment_set")
        kw["stratifiers"] = _strings(an.get("stratifiers", []), "analysis.stratifiers")
        kw["baseline_terms"] = _strings(an.get("baseline_terms", []), "analysis.baseline_terms")
        bins = an.get("dose_bins")
        if bins is not None:
            kw["dose_bins"] = tuple(_number(b, "analysis.dose_bins") for b in bins)
        an.done()

    sl = top.table("super_learner")
    if sl is not None:
        for key in ("q_library", "g_library"):
            lib = _library(sl.get(key), f"super_learner.{key}")
            if lib is not None:
                kw[key] = lib
        kw["V"] = _int(sl, "V", DEFAULT_FOLDS)
        kw["seed"] = _int(sl, "seed", DEFAULT_SEED)
        try:
            kw["loss"] = Loss(sl.get("loss", "negative_log_likelihood", str))
        except LearnerError as exc:
            raise ConfigError(f"super_learner.loss: {exc}") from None
        kw["stratify"] = sl.get("stratify", True, bool)
        sl.done()

    tm = top.table("tmle")
    if tm is not None:
        gb = tm.get("g_bound")
        if gb is not None:
            gb = _number(gb, "tmle.g_bound")
            if not 0 <= gb < 0.5:
                raise ConfigError("tmle.g_bound must lie in [0, 0.5)")
        kw["g_bound"] = gb
        qb = _number(tm.get("q_bound", DEFAULT_Q_BOUND), "tmle.q_bound")
        if not 0 <= qb < 0.5:
            raise ConfigError("tmle.q_bound must lie in [0, 0.5)")
        kw["q_bound"] = qb
        tm.done()

    se = top.table("sensitivity")
    if se is not None:
        grid = se.get("grid")
        if grid is not None:
            kw["sensitivity_grid"] = tuple(_number(g, "sensitivity.grid") for g in grid)
        kw["sensitivity_points"] = _int(se, "points", DEFAULT_POINTS)
        se.done()

    out = top.table("output")
    if out is not None:
        kw["output_dir"] = base / out.require("dir", str)
        out.done()

    dgp_t = top.table("dgp")
    sim_t = top.table("simulate")
    if dgp_t is not None or sim_t is not None:
        if dgp_t is None:
            raise ConfigError("simulate: a [dgp] section is required")
        dgp = _parse_dgp(dgp_t)
        kw["simulation"] = _parse_simulation(sim_t or _Table({}, "simulate"), dgp)

    top.done()
    return RunConfig(**kw)


def _parse_model(t: _Table) -> LogisticModel:
    intercept = _number(t.require("intercept"), f"{t.where}.intercept")
    terms = t.get("terms", {}, dict)
    model = LogisticModel(intercept, {str(k): _number(v, f"{t.where}.terms.{k}") for k, v in terms.items()})
    t.done()
    return model


def _parse_dgp(t: _Table) -> DgpSpec:
    covs = []
    for c in t.tables("covariates"):
        name = c.require("name", str)
        dist = c.require("distribution", str)
        clip = c.get("clip")
        params = {k: _number(v, f"{c.where}.{k}") for k, v in c.data.items() if k not in ("name", "distribution", "clip")}
        c.used.update(params)
        c.done()
        try:
            covs.append(Covariate(name, dist, params, None if clip is None else (float(clip[0]), float(clip[1]))))
        except (DgpError, TypeError, IndexError) as exc:
            raise ConfigError(f"{c.where}: {exc}") from None
    trt = t.table("treatment")
    out = t.table("outcome")
    if trt is None or out is None:
        raise ConfigError("dgp: [dgp.treatment] and [dgp.outcome] are required")
    try:
        spec = DgpSpec(
            tuple(covs),
            _parse_model(trt),
            _parse_model(out),
            seed=_int(t, "seed", 42),
            treatment_name=t.get("treatment_name", "A", str),
            outcome_name=t.get("outcome_name", "Y", str),
        )
    except DgpError as exc:
        raise ConfigError(f"dgp: {exc}") from None
    t.done()
    return spec


def _parse_simulation(t: _Table, dgp: DgpSpec) -> SimulationConfig:
    ests = []
    for e in t.tables("estimators"):
        q = _library(e.get("q_library"), f"{e.where}.q_library") or ()
        g = _library(e.get("g_library"), f"{e.where}.g_library") or ()
        gb = e.get("g_bound")
        try:
            ests.append(
                EstimatorConfig(
                    name=e.require("name", str),
                    kind=e.get("kind", "tmle", str),
                    q_library=q,
                    g_library=g,
                    V=_int(e, "V", 10),
                    g_bound=None if gb is None else _number(gb, f"{e.where}.g_bound"),
                    q_bound=_number(e.get("q_bound", DEFAULT_Q_BOUND), f"{e.where}.q_bound"),
                    stratify=e.get("stratify", True, bool),
                )
            )
        except ValueError as exc:
            raise ConfigError(f"{e.where}: {exc}") from None
        e.done()
    if not ests:
        raise ConfigError("simulate.estimators: at least one estimator is required")
    truth = t.get("truth")
    cfg = SimulationConfig(
        dgp=dgp,
        n=_int(t, "n", 1000),
        reps=_int(t, "reps", 100),
        seed=_int(t, "seed", DEFAULT_SEED),
        estimators=tuple(ests),
        truth=None if truth is None else _number(truth, "simulate.truth"),
        mc_size=_int(t, "mc_size", 1_000_000),
    )
    if cfg.reps < 1 or cfg.n < 1:
        raise ConfigError("simulate: n and reps must be positive")
    t.done()
    return cfg
