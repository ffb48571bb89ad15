"""Causal-gap sensitivity analysis.

The causal gap is the difference between the statistical estimand and the
causal effect. For a hypothesised gap ``delta`` the point estimate and both
confidence bounds simply shift by ``-delta``; the interesting output is the
gap size at which the substantive conclusion changes.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

DEFAULT_POINTS = 41


@dataclass(frozen=True)
class SensitivityRow:
    delta: float
    delta_se_units: float
    estimate: float
    lower: float
    upper: float


@dataclass(frozen=True)
class SensitivityCurve:
    """Shifted estimates over a gap grid plus the exact threshold gaps.

    Positive-side thresholds (``delta > 0``):

    * ``threshold_significance_pos`` -- smallest gap at which the shifted lower
      bound reaches 0 (only when the lower bound starts above 0);
    * ``threshold_sign_reversal_pos`` -- gap beyond which the shifted upper bound
      is negative (only when the upper bound starts above 0).

    For a negative estimate the ``_neg`` fields mirror these for negative gaps
    and the ``_pos`` fields are ``None``; for a non-negative estimate it is the
    other way round.
    """

    psi: float
    se: float
    ci: tuple[float, float]
    rows: tuple[SensitivityRow, ...]
    threshold_significance_pos: float | None
    threshold_sign_reversal_pos: float | None
    threshold_significance_neg: float | None
    threshold_sign_reversal_neg: float | None

    @property
    def delta_grid(self) -> np.ndarray:
        return np.array([r.delta for r in self.rows])

    def thresholds(self) -> dict:
        return {
            "significance_pos": self.threshold_significance_pos,
            "sign_reversal_pos": self.threshold_sign_reversal_pos,
            "significance_neg": self.threshold_significance_neg,
            "sign_reversal_neg": self.threshold_sign_reversal_neg,
        }

    def to_rows(self) -> list[dict]:
        return [r.__dict__.copy() for r in self.rows]

    def describe(self) -> list[str]:
        """Plain-language statements about the thresholds that exist for this estimate."""
        lines = []
        if self.threshold_significance_pos is not None:
            lines.append(f"the interval excludes 0 unless the causal gap is at least {self.threshold_significance_pos:.4g}")
        if self.threshold_significance_neg is not None:
            lines.append(f"the interval excludes 0 unless the causal gap is at most {self.threshold_significance_neg:.4g}")
        if self.threshold_sign_reversal_pos is not None:
            lines.append(f"the whole interval turns negative once the causal gap exceeds {self.threshold_sign_reversal_pos:.4g}")
        if self.threshold_sign_reversal_neg is not None:
            lines.append(f"the whole interval turns positive once the causal gap is below {self.threshold_sign_reversal_neg:.4g}")
        if not lines:
            lines.append("no threshold applies to this estimate")
        return lines


def default_grid(psi: float, se: float, points: int = DEFAULT_POINTS) -> np.ndarray:
    """Symmetric grid over ``[-2|psi|, 2|psi|]`` that contains 0 exactly."""
    half = max(int(points) // 2, 1)
    scale = 2 * abs(psi) if psi != 0 else 4 * se
    return np.arange(-half, half + 1) / half * scale


def causal_gap_curve(psi: float, se: float, ci: Sequence[float], grid: Sequence[float] | None = None) -> SensitivityCurve:
    lower, upper = float(ci[0]), float(ci[1])
    if not se > 0:
        raise ValueError(f"standard error must be positive, got {se}")
    if not lower <= psi <= upper:
        raise ValueError(f"interval [{lower}, {upper}] does not contain the estimate {psi}")
    deltas = default_grid(psi, se) if grid is None else np.asarray(grid, dtype=float)
    if deltas.size == 0:
        raise ValueError("sensitivity grid is empty")
    deltas = np.sort(deltas)
    rows = tuple(
        SensitivityRow(float(d), float(d / se), psi - float(d), lower - float(d), upper - float(d)) for d in deltas
    )
    return SensitivityCurve(
        psi=float(psi),
        se=float(se),
        ci=(lower, upper),
        rows=rows,
        threshold_significance_pos=lower if psi >= 0 and lower > 0 else None,
        threshold_sign_reversal_pos=upper if psi >= 0 and upper > 0 else None,
        threshold_significance_neg=upper if psi < 0 and upper < 0 else None,
        threshold_sign_reversal_neg=lower if psi < 0 and lower < 0 else None,
    )
