"""Identification diagnostics: positivity tables, propensity overlap, crude dose risks."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import pandas as pd
from scipy.stats import rankdata

from .data_model import Dataset, DataError

N_BINS = 20
BIN_EDGES = np.arange(N_BINS + 1) / N_BINS
DEFAULT_DOSE_EDGES = (0.0, 10.0, 20.0, 30.0, 40.0, 50.0)


@dataclass(frozen=True)
class PositivityCell:
    level: str
    n_control: int
    n_treated: int


@dataclass(frozen=True)
class PositivityTable:
    stratifier: str
    cells: tuple[PositivityCell, ...]
    zero_cells: tuple[str, ...]

    @property
    def n(self) -> int:
        return sum(c.n_control + c.n_treated for c in self.cells)

    def to_rows(self) -> list[dict]:
        return [{"stratifier": self.stratifier, **c.__dict__} for c in self.cells]


def positivity_table(ds: Dataset, stratifier: str) -> PositivityTable:
    """Control/treated counts per level of a categorical stratifier.

    Reads only the treatment and stratifier columns, so it can run before any
    outcome data are examined. Rows missing either value are not counted.
    """
    if ds.spec(stratifier).kind != "categorical" or not isinstance(ds.frame[stratifier].dtype, pd.CategoricalDtype):
        raise DataError(f"stratifier {stratifier!r} must be categorical")
    strata = ds.frame[stratifier]
    a = ds.frame[ds.treatment].to_numpy(dtype=float) if ds.treatment else None
    if a is None:
        raise DataError("positivity table needs a treatment column")
    cells = []
    for level in strata.cat.categories:
        in_level = (strata == level).to_numpy()
        cells.append(PositivityCell(str(level), int(np.sum(in_level & (a == 0))), int(np.sum(in_level & (a == 1)))))
    zero = tuple(c.level for c in cells if c.n_control == 0 or c.n_treated == 0)
    return PositivityTable(stratifier, tuple(cells), zero)


def c_statistic(g, A) -> float:
    """Area under the ROC curve of ``g`` for treatment, ties counted as one half."""
    g = np.asarray(g, dtype=float)
    A = np.asarray(A, dtype=float)
    n1 = int(np.sum(A == 1))
    n0 = int(np.sum(A == 0))
    if n1 == 0 or n0 == 0:
        raise ValueError("c-statistic needs both treated and control observations")
    ranks = rankdata(g, method="average")
    u = ranks[A == 1].sum() - n1 * (n1 + 1) / 2.0
    return float(u / (n1 * n0))


@dataclass(frozen=True)
class OverlapSummary:
    edges: np.ndarray
    control_counts: np.ndarray
    treated_counts: np.ndarray
    c_statistic: float
    control_range: tuple[float, float]
    treated_range: tuple[float, float]

    def to_rows(self) -> list[dict]:
        return [
            {"bin_lower": float(lo), "bin_upper": float(hi), "n_control": int(c), "n_treated": int(t)}
            for lo, hi, c, t in zip(self.edges[:-1], self.edges[1:], self.control_counts, self.treated_counts)
        ]

    def to_dict(self) -> dict:
        return {
            "c_statistic": self.c_statistic,
            "control_range": list(self.control_range),
            "treated_range": list(self.treated_range),
            "bins": self.to_rows(),
        }


def ps_bins(g) -> np.ndarray:
    """Bin index for 0.05-wide bins: ``[0, .05], (.05, .10], ..., (.95, 1]``."""
    g = np.asarray(g, dtype=float)
    return np.clip(np.searchsorted(BIN_EDGES, g, side="left") - 1, 0, N_BINS - 1)


def overlap_summary(g, A) -> OverlapSummary:
    g = np.asarray(g, dtype=float)
    A = np.asarray(A, dtype=float)
    if np.any((g < 0) | (g > 1)):
        raise ValueError("propensity scores must lie in [0, 1]")
    idx = ps_bins(g)
    ctrl = np.bincount(idx[A == 0], minlength=N_BINS)
    trt = np.bincount(idx[A == 1], minlength=N_BINS)

    def rng(x):
        return (float(x.min()), float(x.max())) if x.size else (math.nan, math.nan)

    both = (A == 0).any() and (A == 1).any()
    return OverlapSummary(
        BIN_EDGES.copy(),
        ctrl,
        trt,
        c_statistic(g, A) if both else math.nan,
        rng(g[A == 0]),
        rng(g[A == 1]),
    )


@dataclass(frozen=True)
class DoseBin:
    label: str
    lower: float
    upper: float
    n: int
    events: int
    proportion: float | None


def crude_dose_table(ds: Dataset, dose_column: str, edges: Sequence[float] = DEFAULT_DOSE_EDGES) -> list[DoseBin]:
    """Crude outcome proportions by dose group.

    The first bin is dose exactly 0 when ``edges[0] == 0``; then ``(e[k], e[k+1]]``
    and a final open bin above the last edge.
    """
    edges = [float(e) for e in edges]
    if not edges or any(b <= a for a, b in zip(edges, edges[1:])):
        raise ValueError("dose edges must be strictly ascending")
    dose = ds.values(dose_column)
    y = ds.Y
    ok = ~(np.isnan(dose) | np.isnan(y))
    dose, y = dose[ok], y[ok]
    bins: list[tuple[str, float, float, np.ndarray]] = []
    if edges[0] == 0:
        bins.append(("0", 0.0, 0.0, dose == 0))
    else:
        bins.append((f"<= {edges[0]:g}", -math.inf, edges[0], dose <= edges[0]))
    for lo, hi in zip(edges, edges[1:]):
        bins.append((f"({lo:g}, {hi:g}]", lo, hi, (dose > lo) & (dose <= hi)))
    bins.append((f"> {edges[-1]:g}", edges[-1], math.inf, dose > edges[-1]))
    out = []
    for label, lo, hi, mask in bins:
        n = int(mask.sum())
        events = int(y[mask].sum())
        out.append(DoseBin(label, lo, hi, n, events, events / n if n else None))
    return out
