"""Cohort ingestion and validation.

A :class:`Dataset` is an immutable pairing of a pandas frame with the
column metadata (role, timing, kind) supplied by the run configuration.
Every transformation in this module returns a new dataset.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, NamedTuple, Sequence

import numpy as np
import pandas as pd

ROLES = ("outcome", "treatment", "covariate", "dose", "id", "ignore")
TIMINGS = ("baseline", "post_treatment", "post_outcome")
KINDS = ("binary", "continuous", "categorical")


class DataError(ValueError):
    """Raised when input data or column metadata cannot be used."""


class DataWarning(UserWarning):
    pass


@dataclass(frozen=True)
class ColumnSpec:
    name: str
    role: str = "covariate"
    timing: str = "baseline"
    kind: str = "continuous"

    def __post_init__(self):
        if not self.name:
            raise DataError("column spec needs a name")
        if self.role not in ROLES:
            raise DataError(f"column {self.name!r}: unknown role {self.role!r} (expected one of {ROLES})")
        if self.timing not in TIMINGS:
            raise DataError(f"column {self.name!r}: unknown timing {self.timing!r} (expected one of {TIMINGS})")
        if self.kind not in KINDS:
            raise DataError(f"column {self.name!r}: unknown kind {self.kind!r} (expected one of {KINDS})")


def check_specs(specs: Sequence[ColumnSpec]) -> None:
    """Check the role invariants of a spec list, raising :class:`DataError`."""
    names = [s.name for s in specs]
    dupes = sorted({n for n in names if names.count(n) > 1})
    if dupes:
        raise DataError(f"duplicate column specs: {dupes}")
    by_role = {r: [s.name for s in specs if s.role == r] for r in ROLES}
    if len(by_role["outcome"]) != 1:
        raise DataError(f"exactly one outcome column required, got {by_role['outcome']}")
    if len(by_role["treatment"]) > 1 or len(by_role["dose"]) > 1:
        raise DataError("at most one treatment column and one dose column are allowed")
    if not by_role["treatment"] and not by_role["dose"]:
        raise DataError("a treatment column or a dose column to dichotomize is required")


class Issue(NamedTuple):
    code: str
    column: str | None
    message: str


@dataclass(frozen=True)
class ValidationReport:
    errors: tuple[Issue, ...] = ()
    warnings: tuple[Issue, ...] = ()
    rows_dropped: int = 0

    @property
    def ok(self) -> bool:
        return not self.errors

    def codes(self) -> list[str]:
        return [e.code for e in self.errors]

    def to_dict(self) -> dict:
        return {
            "ok": self.ok,
            "errors": [i._asdict() for i in self.errors],
            "warnings": [i._asdict() for i in self.warnings],
            "rows_dropped": self.rows_dropped,
        }


@dataclass(frozen=True)
class Dataset:
    """Analysis data ``O = (Y, A, W)`` plus the metadata describing each column.

    Categorical columns are stored as ``pd.Categorical`` whose category order is
    the order of first appearance in the source file. Missing values are NaN.
    """

    frame: pd.DataFrame
    specs: tuple[ColumnSpec, ...]
    source: str | None = field(default=None, compare=False)

    def __post_init__(self):
        missing = [s.name for s in self.specs if s.name not in self.frame.columns]
        if missing:
            raise DataError(f"specs without data: {missing}")

    @property
    def n(self) -> int:
        return len(self.frame)

    def spec(self, name: str) -> ColumnSpec:
        for s in self.specs:
            if s.name == name:
                return s
        raise DataError(f"unknown column {name!r}")

    def _role(self, role: str) -> str | None:
        names = [s.name for s in self.specs if s.role == role]
        return names[0] if names else None

    @property
    def outcome(self) -> str:
        return self._role("outcome")

    @property
    def treatment(self) -> str | None:
        return self._role("treatment")

    @property
    def dose(self) -> str | None:
        return self._role("dose")

    @property
    def covariates(self) -> list[str]:
        return [s.name for s in self.specs if s.role == "covariate"]

    def levels(self, name: str) -> list:
        col = self.frame[name]
        if not isinstance(col.dtype, pd.CategoricalDtype):
            raise DataError(f"column {name!r} is not categorical")
        return list(col.cat.categories)

    def values(self, name: str) -> np.ndarray:
        """Numeric column as a float array (categoricals are rejected)."""
        self.spec(name)
        col = self.frame[name]
        if isinstance(col.dtype, pd.CategoricalDtype):
            raise DataError(f"column {name!r} is categorical; use design_matrix")
        return col.to_numpy(dtype=float)

    @property
    def Y(self) -> np.ndarray:
        return self.values(self.outcome)

    @property
    def A(self) -> np.ndarray:
        if self.treatment is None:
            raise DataError("dataset has no treatment column; dichotomize the dose first")
        return self.values(self.treatment)

    def with_frame(self, frame: pd.DataFrame, specs: Iterable[ColumnSpec] | None = None) -> "Dataset":
        return replace(self, frame=frame, specs=tuple(self.specs if specs is None else specs))


def _parse_cell(raw: str, spec: ColumnSpec, row: int):
    text = raw.strip()
    if text == "":
        return None
    if spec.kind == "categorical":
        return text
    try:
        value = float(text)
    except ValueError:
        raise DataError(f"row {row}, column {spec.name!r}: cannot parse {raw!r} as a number") from None
    if math.isnan(value):
        return None
    if spec.kind == "binary" and value not in (0.0, 1.0):
        raise DataError(f"row {row}, column {spec.name!r}: binary column contains {raw!r}")
    return value


def load_dataset(csv_path: str | Path, specs: Sequence[ColumnSpec]) -> Dataset:
    """Read a UTF-8 CSV file and type its columns according to ``specs``.

    Row numbers in error messages count data rows from 1 (the header is row 0).
    Columns with role ``ignore`` are not read; unspecified columns are skipped.
    """
    specs = tuple(specs)
    check_specs(specs)
    path = Path(csv_path)
    if not path.is_file():
        raise DataError(f"data file not found: {path}")
    with path.open(newline="", encoding="utf-8-sig") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise DataError(f"{path}: empty file (no header row)")
        header = [h.strip() for h in header]
        absent = [s.name for s in specs if s.name not in header]
        if absent:
            raise DataError(f"{path}: header lacks columns {absent}")
        used = [s for s in specs if s.role != "ignore"]
        idx = {s.name: header.index(s.name) for s in used}
        data: dict[str, list] = {s.name: [] for s in used}
        for row_no, record in enumerate(reader, start=1):
            if not record or all(not c.strip() for c in record):
                continue
            if len(record) != len(header):
                raise DataError(f"{path}: row {row_no} has {len(record)} fields, header has {len(header)}")
            for s in used:
                data[s.name].append(_parse_cell(record[idx[s.name]], s, row_no))
    if not used or not data[used[0].name]:
        raise DataError(f"{path}: no data rows")

    frame = pd.DataFrame(index=pd.RangeIndex(len(data[used[0].name])))
    for s in used:
        vals = data[s.name]
        if s.kind == "categorical":
            levels = list(dict.fromkeys(v for v in vals if v is not None))
            frame[s.name] = pd.Categorical(vals, categories=levels)
        else:
            frame[s.name] = np.array([np.nan if v is None else v for v in vals], dtype=float)
    return Dataset(frame=frame, specs=tuple(used), source=str(path))


def analysis_columns(ds: Dataset, adjustment_set: Sequence[str]) -> list[str]:
    cols = [ds.outcome]
    if ds.treatment is not None:
        cols.append(ds.treatment)
    cols.extend(c for c in adjustment_set if c in ds.frame.columns and c not in cols)
    return cols


def validate(ds: Dataset, adjustment_set: Sequence[str]) -> ValidationReport:
    """Check timing, role and coding rules for an analysis on ``adjustment_set``.

    Rows with missing analysis values are reported (and later dropped by
    :func:`complete_cases`); they do not make the report fail.
    """
    errors: list[Issue] = []
    warns: list[Issue] = []
    known = {s.name: s for s in ds.specs}

    for col in adjustment_set:
        spec = known.get(col)
        if spec is None:
            errors.append(Issue("UNKNOWN_COLUMN", col, f"adjustment column {col!r} is not in the dataset"))
            continue
        if spec.role in ("outcome", "treatment", "dose"):
            errors.append(Issue("ROLE_CONFLICT", col, f"{col!r} has role {spec.role} and cannot be adjusted for"))
        if spec.timing != "baseline":
            errors.append(
                Issue(
                    "TIMING_VIOLATION",
                    col,
                    f"{col!r} is measured {spec.timing.replace('_', '-')}; only baseline covariates may be confounders",
                )
            )

    targets = [("outcome", ds.outcome)]
    if ds.treatment is None:
        errors.append(Issue("NO_TREATMENT", ds.dose, "no binary treatment column; dichotomize the dose column"))
    else:
        targets.append(("treatment", ds.treatment))
    for role, col in targets:
        spec = known[col]
        vals = ds.frame[col]
        bad = spec.kind != "binary" or isinstance(vals.dtype, pd.CategoricalDtype)
        if not bad:
            observed = vals.dropna().to_numpy(dtype=float)
            bad = bool(np.any((observed != 0.0) & (observed != 1.0)))
        if bad:
            errors.append(Issue("NOT_BINARY", col, f"{role} column {col!r} must be coded 0/1"))

    cols = analysis_columns(ds, adjustment_set)
    missing = ds.frame[cols].isna().any(axis=1).to_numpy()
    dropped = int(missing.sum())
    if dropped:
        rows = (np.flatnonzero(missing) + 1).tolist()
        shown = ", ".join(map(str, rows[:20])) + (" ..." if len(rows) > 20 else "")
        per_col = {c: int(ds.frame[c].isna().sum()) for c in cols if ds.frame[c].isna().any()}
        warns.append(
            Issue("MISSING_VALUES", None, f"{dropped} row(s) with missing analysis values dropped (rows {shown}); by column {per_col}")
        )
    if dropped == ds.n:
        errors.append(Issue("NO_COMPLETE_ROWS", None, "no row has complete analysis data"))
    elif ds.treatment is not None and not any(e.code == "NOT_BINARY" for e in errors):
        a = ds.frame.loc[~missing, ds.treatment].to_numpy(dtype=float)
        if a.sum() == 0:
            warns.append(Issue("NO_TREATED", ds.treatment, "no treated subjects"))
        elif a.sum() == len(a):
            warns.append(Issue("NO_CONTROL", ds.treatment, "no untreated subjects"))
    return ValidationReport(errors=tuple(errors), warnings=tuple(warns), rows_dropped=dropped)


def complete_cases(ds: Dataset, adjustment_set: Sequence[str]) -> Dataset:
    """Drop rows with missing values in the outcome, treatment or adjustment set."""
    cols = analysis_columns(ds, adjustment_set)
    keep = ~ds.frame[cols].isna().any(axis=1)
    frame = ds.frame.loc[keep].reset_index(drop=True)
    for name in frame.columns:
        if isinstance(frame[name].dtype, pd.CategoricalDtype):
            frame[name] = frame[name].cat.remove_unused_categories()
    return ds.with_frame(frame)


def dichotomize_treatment(ds: Dataset, dose_column: str, name: str = "treated") -> Dataset:
    """Add a binary treatment column equal to 1 where ``dose > 0``.

    The dose column keeps its ``dose`` role so diagnostics can still group by it.
    """
    spec = ds.spec(dose_column)
    if spec.kind == "categorical":
        raise DataError(f"dose column {dose_column!r} must be numeric")
    if ds.treatment is not None:
        raise DataError(f"dataset already has treatment column {ds.treatment!r}")
    if name in ds.frame.columns:
        raise DataError(f"column {name!r} already exists")
    dose = ds.frame[dose_column].to_numpy(dtype=float)
    negative = np.flatnonzero(dose < 0)
    if negative.size:
        raise DataError(f"dose column {dose_column!r} has negative values (rows {(negative + 1).tolist()[:10]})")
    treated = np.where(np.isnan(dose), np.nan, (dose > 0).astype(float))
    if np.nansum(treated) == 0:
        warnings.warn("no treated subjects", DataWarning, stacklevel=2)
    frame = ds.frame.copy()
    frame[name] = treated
    specs = [s if s.name != dose_column else replace(s, role="dose") for s in ds.specs]
    specs.append(ColumnSpec(name=name, role="treatment", timing=spec.timing, kind="binary"))
    return ds.with_frame(frame, specs)


def recode_categories(ds: Dataset, column: str, mapping: Mapping[str, str]) -> Dataset:
    """Merge or rename the levels of a categorical column.

    New levels are ordered by the first old level that maps onto them.
    """
    col = ds.frame[column]
    if not isinstance(col.dtype, pd.CategoricalDtype):
        raise DataError(f"column {column!r} is not categorical")
    observed = [lvl for lvl in col.cat.categories if (col == lvl).any()]
    unmapped = [lvl for lvl in observed if lvl not in mapping]
    if unmapped:
        raise DataError(f"column {column!r}: no mapping for levels {unmapped}")
    new_levels = list(dict.fromkeys(mapping[lvl] for lvl in col.cat.categories if lvl in mapping))
    recoded = [None if pd.isna(v) else mapping[v] for v in col.astype(object)]
    frame = ds.frame.copy()
    frame[column] = pd.Categorical(recoded, categories=new_levels)
    return ds.with_frame(frame)


def cut_column(
    ds: Dataset,
    column: str,
    edges: Sequence[float],
    labels: Sequence[str] | None = None,
    name: str | None = None,
) -> Dataset:
    """Bin a numeric column into right-closed intervals ``(e[k], e[k+1]]``.

    The result is a categorical covariate with the same timing as the source.
    Values outside the edges raise rather than silently becoming missing.
    """
    edges = [float(e) for e in edges]
    if len(edges) < 2 or any(b <= a for a, b in zip(edges, edges[1:])):
        raise DataError("bin edges must be strictly increasing with at least two entries")
    if labels is None:
        labels = [f"({a:g}, {b:g}]" for a, b in zip(edges, edges[1:])]
    if len(labels) != len(edges) - 1:
        raise DataError(f"{len(edges) - 1} bins need {len(edges) - 1} labels, got {len(labels)}")
    x = ds.values(column)
    outside = ~np.isnan(x) & ((x <= edges[0]) | (x > edges[-1]))
    if outside.any():
        raise DataError(f"column {column!r}: values outside ({edges[0]:g}, {edges[-1]:g}] in rows {(np.flatnonzero(outside) + 1).tolist()[:10]}")
    cats = pd.cut(x, bins=edges, labels=list(labels), right=True)
    name = name or f"{column}_group"
    frame = ds.frame.copy()
    frame[name] = pd.Categorical(cats, categories=list(labels))
    src = ds.spec(column)
    specs = [s for s in ds.specs if s.name != name]
    specs.append(ColumnSpec(name=name, role="covariate", timing=src.timing, kind="categorical"))
    return ds.with_frame(frame, specs)


def design_matrix(ds: Dataset, columns: Sequence[str]) -> tuple[np.ndarray, list[str]]:
    """Numeric matrix for ``columns`` with categoricals expanded to indicators.

    The first category of each categorical column is the reference level.
    """
    blocks, names = [], []
    for col in columns:
        ds.spec(col)
        series = ds.frame[col]
        if isinstance(series.dtype, pd.CategoricalDtype):
            for lvl in series.cat.categories[1:]:
                blocks.append((series == lvl).to_numpy(dtype=float))
                names.append(f"{col}[{lvl}]")
        else:
            blocks.append(series.to_numpy(dtype=float))
            names.append(col)
    if not blocks:
        return np.empty((ds.n, 0)), []
    return np.column_stack(blocks), names
