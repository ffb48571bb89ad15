"""Targeted maximum likelihood estimation of the marginal risk difference.

The workflow is ``fit_nuisances -> clever_covariates -> fluctuate -> estimate``;
:func:`run_tmle` chains the four steps. Risk ratio and odds ratio are derived
from the same targeted counterfactual means and get delta-method inference on
the log scale.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import expit, logit

from .data_model import Dataset, DataError, design_matrix
from .learners import NLL, LearnerSpec, Loss, irls_logistic
from .super_learner import DEFAULT_FOLDS, DEFAULT_SEED, FoldAssignment, SuperLearnerFit, fit_super_learner, make_folds

Z95 = 1.96
DEFAULT_Q_BOUND = 1e-3
SCORE_TOL = 1e-8


class EstimationError(RuntimeError):
    """Raised when a nuisance fit or the targeting step cannot be completed."""


class PositivityError(EstimationError):
    pass


class TmleWarning(UserWarning):
    pass


def truncation_bound(n: int, override: float | None = None) -> float:
    """Lower bound for the propensity score, ``5 / (sqrt(n) * ln(n))``.

    For small ``n`` the formula reaches 0.5 or more and is meaningless; an
    explicit ``override`` is then required.
    """
    if override is not None:
        if not 0 <= override < 0.5:
            raise ValueError(f"propensity bound must lie in [0, 0.5), got {override}")
        return float(override)
    if n < 2:
        raise ValueError(f"truncation bound needs n >= 2, got {n}")
    bound = 5.0 / (math.sqrt(n) * math.log(n))
    if bound >= 0.5:
        raise ValueError(f"5/(sqrt(n) ln n) = {bound:.4f} >= 0.5 for n={n}; supply an explicit bound")
    return bound


@dataclass(frozen=True)
class NuisanceFits:
    """Initial outcome regression and propensity score evaluated on the sample.

    ``Q1``/``Q0``/``QA`` are ``E(Y | A=a, W_i)`` for a = 1, 0 and the observed
    ``A_i``; ``g`` is the truncated ``P(A=1 | W_i)``.
    """

    Q1: np.ndarray
    Q0: np.ndarray
    QA: np.ndarray
    g: np.ndarray
    g_raw: np.ndarray
    g_bound: float
    truncation_count: int
    q_bound: float = 0.0
    q_fit: SuperLearnerFit | None = field(default=None, repr=False)
    g_fit: SuperLearnerFit | None = field(default=None, repr=False)

    def summary(self) -> dict:
        out = {
            "g_bound": self.g_bound,
            "q_bound": self.q_bound,
            "truncation_count": self.truncation_count,
            "g_min": float(self.g_raw.min()),
            "g_max": float(self.g_raw.max()),
            "q_min": float(min(self.Q1.min(), self.Q0.min())),
            "q_max": float(max(self.Q1.max(), self.Q0.max())),
        }
        if self.q_fit is not None:
            out["q_super_learner"] = self.q_fit.summary()
            out["q_ensemble_cv_risk"] = self.q_fit.ensemble_cv_risk
        if self.g_fit is not None:
            out["g_super_learner"] = self.g_fit.summary()
            out["g_ensemble_cv_risk"] = self.g_fit.ensemble_cv_risk
        return out


def bound_q(q, q_bound: float) -> np.ndarray:
    q = np.clip(np.asarray(q, dtype=float), 0.0, 1.0)
    if q_bound > 0:
        q = np.clip(q, q_bound, 1 - q_bound)
    return q


def truncate_g(g_raw, g_bound: float) -> tuple[np.ndarray, int]:
    g_raw = np.asarray(g_raw, dtype=float)
    g = np.clip(g_raw, g_bound, 1 - g_bound)
    return g, int(np.sum(g != g_raw))


def nuisances_from_predictions(A, Q1, Q0, g_raw, g_bound: float = 0.0, q_bound: float = 0.0) -> NuisanceFits:
    """Build :class:`NuisanceFits` from externally computed predictions."""
    A = np.asarray(A, dtype=float)
    Q1, Q0 = bound_q(Q1, q_bound), bound_q(Q0, q_bound)
    g, count = truncate_g(g_raw, g_bound)
    return NuisanceFits(Q1, Q0, np.where(A == 1, Q1, Q0), g, np.asarray(g_raw, dtype=float), g_bound, count, q_bound)


def fit_nuisances(
    ds: Dataset,
    adjustment_set: Sequence[str],
    q_library: Sequence[LearnerSpec],
    g_library: Sequence[LearnerSpec],
    folds: FoldAssignment | None = None,
    g_bound: float | None = None,
    q_bound: float = DEFAULT_Q_BOUND,
    loss: Loss = NLL,
    g_adjustment_set: Sequence[str] | None = None,
    n_jobs: int = 1,
) -> NuisanceFits:
    """Super-learner fits of ``Q(A, W)`` and ``g(W)``.

    ``g_bound=None`` uses :func:`truncation_bound`; ``0`` disables truncation.
    ``q_bound`` keeps initial outcome predictions inside ``[q_bound, 1 - q_bound]``
    (``0`` only clips to ``[0, 1]``).
    """
    A, Y = ds.A, ds.Y
    if A.sum() == 0 or A.sum() == len(A):
        raise PositivityError("all observations share one treatment level; the effect is not estimable")
    W, _ = design_matrix(ds, adjustment_set)
    Wg, _ = design_matrix(ds, adjustment_set if g_adjustment_set is None else g_adjustment_set)
    if folds is None:
        folds = make_folds(ds.n, min(DEFAULT_FOLDS, ds.n), DEFAULT_SEED, stratify=Y)
    bound = truncation_bound(ds.n, g_bound)

    XA = np.column_stack([A, W])
    try:
        q_fit = fit_super_learner(q_library, XA, Y, folds, loss, n_jobs)
    except Exception as exc:
        raise EstimationError(f"outcome regression failed: {exc}") from exc
    try:
        g_fit = fit_super_learner(g_library, Wg, A, folds, loss, n_jobs)
    except Exception as exc:
        raise EstimationError(f"propensity score fit failed: {exc}") from exc

    Q1 = q_fit.predict(np.column_stack([np.ones_like(A), W]))
    Q0 = q_fit.predict(np.column_stack([np.zeros_like(A), W]))
    nuis = nuisances_from_predictions(A, Q1, Q0, g_fit.predict(Wg), bound, q_bound)
    return NuisanceFits(**{**nuis.__dict__, "q_fit": q_fit, "g_fit": g_fit})


def clever_covariates(A, g) -> tuple[np.ndarray, np.ndarray]:
    """``H1 = A / g`` and ``H0 = -(1 - A) / (1 - g)``."""
    A = np.asarray(A, dtype=float)
    g = np.asarray(g, dtype=float)
    if np.any((g <= 0) | (g >= 1)) or not np.all(np.isfinite(g)):
        raise PositivityError("propensity scores must lie strictly inside (0, 1); set a truncation bound")
    return A / g, -(1 - A) / (1 - g)


@dataclass(frozen=True)
class Fluctuation:
    eps0: float
    eps1: float
    converged: bool

    def update(self, Q, H1, H0) -> np.ndarray:
        """Apply the fitted submodel ``expit(logit(Q) + eps1*H1 + eps0*H0)``."""
        Q = np.asarray(Q, dtype=float)
        with np.errstate(divide="ignore"):
            eta = logit(Q) + self.eps1 * np.asarray(H1) + self.eps0 * np.asarray(H0)
        return expit(eta)


def fluctuate(Q_init, H1, H0, Y) -> Fluctuation:
    """Fit ``(eps0, eps1)`` by logistic regression of ``Y`` on ``(H0, H1)`` with offset ``logit(Q_init)``.

    Rows where ``Q_init`` is exactly 0 or 1 are fixed points of the submodel and
    are left out, provided ``Y`` agrees with them.
    """
    Q = np.asarray(Q_init, dtype=float)
    Y = np.asarray(Y, dtype=float)
    H = np.column_stack([H0, H1]).astype(float)
    if np.any(np.isnan(Q)) or np.any((Q < 0) | (Q > 1)) or not np.all(np.isfinite(H)):
        raise EstimationError("non-finite offset or clever covariate in fluctuation")
    edge = (Q == 0) | (Q == 1)
    if np.any(edge & (Y != Q)):
        raise EstimationError("non-finite offset: initial outcome prediction is 0 or 1 where Y disagrees")
    keep = ~edge
    cols = np.flatnonzero(np.any(H[keep] != 0, axis=0))
    eps = np.zeros(2)
    converged = True
    if keep.any() and cols.size:
        res = irls_logistic(H[keep][:, cols], Y[keep], offset=logit(Q[keep]), tol=1e-14)
        eps[cols] = res.coef
        converged = res.converged
        if not converged:
            warnings.warn("fluctuation IRLS did not converge", TmleWarning, stacklevel=2)
    if not np.all(np.isfinite(eps)):
        raise EstimationError("fluctuation produced non-finite parameters")
    return Fluctuation(float(eps[0]), float(eps[1]), converged)


@dataclass(frozen=True)
class TmleResult:
    psi_rd: float
    psi_rr: float | None
    psi_or: float | None
    mu1: float
    mu0: float
    ic: dict
    se: dict
    ci95: dict
    pvalue: dict
    gcomp_rd: float
    fluctuation: Fluctuation
    nuisance: dict
    n: int

    @property
    def ic_mean(self) -> float:
        return float(np.mean(self.ic["rd"]))

    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "psi_rd": self.psi_rd,
            "psi_rr": self.psi_rr,
            "psi_or": self.psi_or,
            "mu1": self.mu1,
            "mu0": self.mu0,
            "se": dict(self.se),
            "ci95": {k: (None if v is None else list(v)) for k, v in self.ci95.items()},
            "pvalue": dict(self.pvalue),
            "gcomp_rd": self.gcomp_rd,
            "ic_mean_rd": self.ic_mean,
            "epsilon": {"eps0": self.fluctuation.eps0, "eps1": self.fluctuation.eps1, "converged": self.fluctuation.converged},
            "nuisance": self.nuisance,
        }


def _se(ic):
    n = len(ic)
    return float(math.sqrt(np.var(ic, ddof=1) / n)) if n > 1 else float("nan")


def _p(z):
    return math.erfc(abs(z) / math.sqrt(2.0)) if np.isfinite(z) else float("nan")


def estimate(ds: Dataset, nuisances: NuisanceFits, fluctuation: Fluctuation | None = None) -> TmleResult:
    """Targeted counterfactual means, contrasts and influence-curve inference."""
    A, Y = ds.A, ds.Y
    g = nuisances.g
    H1, H0 = clever_covariates(A, g)
    if fluctuation is None:
        fluctuation = fluctuate(nuisances.QA, H1, H0, Y)
    n = len(Y)
    Q1s = fluctuation.update(nuisances.Q1, 1.0 / g, np.zeros(n))
    Q0s = fluctuation.update(nuisances.Q0, np.zeros(n), -1.0 / (1 - g))
    QAs = np.where(A == 1, Q1s, Q0s)
    mu1, mu0 = float(np.mean(Q1s)), float(np.mean(Q0s))
    rd = mu1 - mu0

    resid = Y - QAs
    ic1 = H1 * resid + Q1s - mu1
    ic0 = -H0 * resid + Q0s - mu0
    ic = {"rd": ic1 - ic0}
    se = {"rd": _se(ic["rd"])}
    ci = {"rd": (rd - Z95 * se["rd"], rd + Z95 * se["rd"])}
    pval = {"rd": _p(rd / se["rd"]) if se["rd"] > 0 else float("nan")}

    rr = odds = None
    if mu0 > 0:
        rr = mu1 / mu0
        ic["log_rr"] = ic1 / mu1 - ic0 / mu0 if mu1 > 0 else None
    if 0 < mu0 < 1 and 0 < mu1 < 1:
        odds = mu1 * (1 - mu0) / (mu0 * (1 - mu1))
        ic["log_or"] = ic1 / (mu1 * (1 - mu1)) - ic0 / (mu0 * (1 - mu0))
    for key, value in (("rr", rr), ("or", odds)):
        curve = ic.get(f"log_{key}")
        if value is None or curve is None or value <= 0:
            ic.pop(f"log_{key}", None)
            se[f"log_{key}"], ci[key], pval[key] = None, None, None
            continue
        s = _se(curve)
        se[f"log_{key}"] = s
        ci[key] = (value * math.exp(-Z95 * s), value * math.exp(Z95 * s))
        pval[key] = _p(math.log(value) / s) if s > 0 else float("nan")

    result = TmleResult(
        psi_rd=rd,
        psi_rr=rr,
        psi_or=odds,
        mu1=mu1,
        mu0=mu0,
        ic=ic,
        se=se,
        ci95=ci,
        pvalue=pval,
        gcomp_rd=gcomp_estimate(nuisances),
        fluctuation=fluctuation,
        nuisance=nuisances.summary(),
        n=n,
    )
    if abs(result.ic_mean) >= SCORE_TOL:
        warnings.warn(f"efficient score equation not solved: mean IC = {result.ic_mean:.3g}", TmleWarning, stacklevel=2)
    return result


def gcomp_estimate(nuisances: NuisanceFits) -> float:
    """Untargeted plug-in ``mean(Q(1, W) - Q(0, W))``. No valid standard error."""
    return float(np.mean(nuisances.Q1 - nuisances.Q0))


def run_tmle(
    ds: Dataset,
    adjustment_set: Sequence[str],
    q_library: Sequence[LearnerSpec],
    g_library: Sequence[LearnerSpec],
    V: int = DEFAULT_FOLDS,
    seed: int = DEFAULT_SEED,
    g_bound: float | None = None,
    q_bound: float = DEFAULT_Q_BOUND,
    loss: Loss = NLL,
    stratify: bool = True,
    g_adjustment_set: Sequence[str] | None = None,
    n_jobs: int = 1,
) -> TmleResult:
    folds = make_folds(ds.n, V, seed, stratify=ds.Y if stratify else None, stratify_name=ds.outcome if stratify else None)
    nuis = fit_nuisances(ds, adjustment_set, q_library, g_library, folds, g_bound, q_bound, loss, g_adjustment_set, n_jobs)
    return estimate(ds, nuis)


# ---------------------------------------------------------------------------
# parametric comparison


@dataclass(frozen=True)
class BaselineTerm:
    term: str
    coef: float
    se: float | None
    odds_ratio: float
    ci_low: float | None
    ci_high: float | None
    pvalue: float | None


@dataclass(frozen=True)
class ParametricBaseline:
    terms: tuple[BaselineTerm, ...]
    converged: bool
    warnings: tuple[str, ...]
    n: int

    def term(self, name: str) -> BaselineTerm:
        for t in self.terms:
            if t.term == name:
                return t
        raise KeyError(name)

    def to_rows(self) -> list[dict]:
        return [t.__dict__.copy() for t in self.terms]


def parametric_baseline(ds: Dataset, columns: Sequence[str], dose_column: str | None = None) -> ParametricBaseline:
    """Main-terms logistic regression of the outcome with per-unit odds ratios.

    Intended as the comparison point for the targeted estimate. Columns that are
    not baseline covariates trigger a ``TIMING_VIOLATION`` warning; under
    separation the Wald intervals are suppressed.
    """
    cols = list(columns)
    if dose_column is not None and dose_column not in cols:
        cols.insert(0, dose_column)
    notes = []
    for c in cols:
        spec = ds.spec(c)
        if spec.timing != "baseline" and spec.role not in ("dose", "treatment"):
            msg = f"TIMING_VIOLATION: {c!r} is measured {spec.timing.replace('_', '-')}"
            notes.append(msg)
            warnings.warn(msg, TmleWarning, stacklevel=2)
    frame_ok = ~ds.frame[cols + [ds.outcome]].isna().any(axis=1).to_numpy()
    X, names = design_matrix(ds, cols)
    X, Y = X[frame_ok], ds.Y[frame_ok]
    Xi = np.column_stack([np.ones(len(Y)), X])
    res = irls_logistic(Xi, Y)
    if res.separated:
        msg = "separation: maximum likelihood estimates do not exist; Wald intervals suppressed"
        notes.append(msg)
        warnings.warn(msg, TmleWarning, stacklevel=2)
    se = None
    if not res.separated:
        mu = expit(Xi @ res.coef)
        info = Xi.T @ ((mu * (1 - mu))[:, None] * Xi)
        try:
            se = np.sqrt(np.diag(np.linalg.inv(info)))
        except np.linalg.LinAlgError:
            notes.append("singular information matrix; Wald intervals suppressed")
    terms = []
    for j, name in enumerate(["(intercept)"] + names):
        b = float(res.coef[j])
        s = None if se is None else float(se[j])
        terms.append(
            BaselineTerm(
                term=name,
                coef=b,
                se=s,
                odds_ratio=math.exp(b) if abs(b) < 700 else float("inf"),
                ci_low=None if s is None else math.exp(b - Z95 * s),
                ci_high=None if s is None else math.exp(b + Z95 * s),
                pvalue=None if s is None or s == 0 else _p(b / s),
            )
        )
    return ParametricBaseline(tuple(terms), res.converged, tuple(notes), int(frame_ok.sum()))
