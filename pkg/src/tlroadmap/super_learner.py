"""V-fold cross-validated stacking with convex (simplex) weights."""

from __future__ import annotations

import logging
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .learners import NLL, LearnerFit, LearnerSpec, Loss, CLIP, fit, predict

logger = logging.getLogger(__name__)

DEFAULT_SEED = 20170704
DEFAULT_FOLDS = 20

META_LEARNER = "convex combination minimising cross-validated risk (projected gradient on the simplex)"


class SuperLearnerError(RuntimeError):
    pass


class SuperLearnerWarning(UserWarning):
    pass


@dataclass(frozen=True)
class FoldAssignment:
    fold: np.ndarray
    V: int
    seed: int
    stratified_on: str | None = None

    def sizes(self) -> np.ndarray:
        return np.bincount(self.fold, minlength=self.V)

    def split(self, v: int) -> tuple[np.ndarray, np.ndarray]:
        return np.flatnonzero(self.fold != v), np.flatnonzero(self.fold == v)


def make_folds(n: int, V: int, seed: int = DEFAULT_SEED, stratify=None, stratify_name: str | None = None) -> FoldAssignment:
    """Assign ``n`` observations to ``V`` folds.

    A seeded permutation is dealt round-robin into the folds, so fold sizes
    differ by at most one. With ``stratify``, each stratum (in sorted order) is
    permuted and dealt separately, continuing the deal where the previous
    stratum stopped; that keeps both per-stratum and overall sizes balanced.
    """
    n, V = int(n), int(V)
    if V < 2:
        raise ValueError(f"need at least 2 folds, got V={V}")
    if V > n:
        raise ValueError(f"V={V} folds exceed n={n} observations")
    rng = np.random.default_rng(seed)
    fold = np.empty(n, dtype=int)
    if stratify is None:
        perm = rng.permutation(n)
        fold[perm] = np.arange(n) % V
        return FoldAssignment(fold, V, seed)
    strata = np.asarray(stratify)
    if strata.shape != (n,):
        raise ValueError("stratification column must have length n")
    start = 0
    for level in np.unique(strata):
        idx = np.flatnonzero(strata == level)
        if len(idx) < 2:
            raise ValueError(f"stratum {level.item()!r} has {len(idx)} observation(s); at least 2 are needed")
        perm = rng.permutation(idx)
        fold[perm] = (start + np.arange(len(idx))) % V
        start = (start + len(idx)) % V
    return FoldAssignment(fold, V, seed, stratify_name or "y")


def _fallback(y_train, loss):
    m = float(np.mean(y_train))
    return float(np.clip(m, CLIP, 1 - CLIP)) if loss.kind == "negative_log_likelihood" else m


def cv_predictions(library: Sequence[LearnerSpec], X, y, folds: FoldAssignment, loss: Loss = NLL, n_jobs: int = 1):
    """Held-out predictions for every learner.

    Returns ``(Z, cv_risks, kept)`` where ``Z`` is n x len(kept), ``cv_risks``
    has one entry per *library* learner (NaN for dropped learners) and ``kept``
    lists the library indices that produced predictions. A learner failing on
    some folds is replaced there by the clipped training mean; failing on every
    fold drops it.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    n = len(y)
    tasks = [(j, v) for j in range(len(library)) for v in range(folds.V)]

    def run(task):
        j, v = task
        tr, te = folds.split(v)
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                f = fit(library[j], X[tr], y[tr])
                return predict(f, X[te]), None
        except Exception as exc:  # noqa: BLE001 - any learner failure triggers the fallback policy
            return np.full(len(te), _fallback(y[tr], loss)), exc

    if n_jobs > 1:
        with ThreadPoolExecutor(max_workers=n_jobs) as pool:
            results = list(pool.map(run, tasks))
    else:
        results = [run(t) for t in tasks]

    Z = np.empty((n, len(library)))
    failed = np.zeros((len(library), folds.V), dtype=bool)
    for (j, v), (pred, exc) in zip(tasks, results):
        Z[folds.fold == v, j] = pred
        if exc is not None:
            failed[j, v] = True
            logger.debug("learner %s failed on fold %d: %s", library[j].label, v, exc)
    kept, risks = [], np.full(len(library), np.nan)
    for j, spec in enumerate(library):
        if failed[j].all():
            warnings.warn(f"learner {spec.label} failed on every fold and was dropped", SuperLearnerWarning, stacklevel=2)
            continue
        if failed[j].any():
            warnings.warn(
                f"learner {spec.label} failed on {int(failed[j].sum())} fold(s); mean prediction used there",
                SuperLearnerWarning,
                stacklevel=2,
            )
        kept.append(j)
        risks[j] = loss(y, Z[:, j])
    return Z[:, kept], risks, kept


def _project_simplex(v):
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - 1.0
    k = np.arange(1, len(v) + 1)
    rho = np.nonzero(u - css / k > 0)[0][-1]
    return np.maximum(v - css[rho] / (rho + 1), 0.0)


def solve_weights(Z, y, loss: Loss = NLL, max_iter: int = 10000, tol: float = 1e-10) -> np.ndarray:
    """Simplex weights minimising the held-out loss of ``Z @ w``.

    Spectral projected gradient with Armijo backtracking, started at the best
    single column, followed by Newton polishing on the support. A linear term
    ``1e-12 * index`` breaks ties toward lower column indices. The returned
    weights never score worse than the best single column.
    """
    Z = np.asarray(Z, dtype=float)
    y = np.asarray(y, dtype=float)
    n, L = Z.shape
    if L == 1:
        return np.ones(1)
    tie = 1e-12 * np.arange(L)

    def objective(w):
        return loss(y, Z @ w) + tie @ w

    def gradient(w):
        d1, _ = loss.derivatives(y, Z @ w)
        return Z.T @ d1 / n + tie

    if not np.all(np.isfinite(Z)) or np.all(Z == Z[:, :1]):
        warnings.warn("degenerate prediction matrix; uniform weights used", SuperLearnerWarning, stacklevel=2)
        return np.full(L, 1.0 / L)

    vertex_risk = np.array([objective(np.eye(L)[j]) for j in range(L)])
    w = np.eye(L)[int(np.argmin(vertex_risk))]
    f = objective(w)
    g = gradient(w)
    step = 1.0
    for _ in range(max_iter):
        d = _project_simplex(w - step * g) - w
        slope = g @ d
        if not np.any(d) or slope >= 0:
            break
        t = 1.0
        while True:
            w_new = w + t * d
            f_new = objective(w_new)
            if f_new <= f + 1e-4 * t * slope or t < 1e-12:
                break
            t *= 0.5
        if f_new > f:
            break
        g_new = gradient(w_new)
        s, r = w_new - w, g_new - g
        sr = s @ r
        step = float(np.clip((s @ s) / sr, 1e-10, 1e10)) if sr > 0 else 1.0
        done = abs(f - f_new) < tol and np.max(np.abs(s)) < 1e-12
        w, f, g = w_new, f_new, g_new
        if done:
            break
    w = _polish(w, Z, y, loss, objective, tie)
    w = np.where(w < 1e-15, 0.0, w)
    return w / w.sum()


def _polish(w, Z, y, loss, objective, tie, rounds=50):
    """Newton steps restricted to the current support, kept feasible."""
    n = len(y)
    for _ in range(rounds):
        S = np.flatnonzero(w > 0)
        if len(S) < 2:
            return w
        pred = Z @ w
        d1, d2 = loss.derivatives(y, pred)
        ZS = Z[:, S]
        g = ZS.T @ d1 / n + tie[S]
        H = ZS.T @ (d2[:, None] * ZS) / n
        # null space of sum(w_S) = const
        B = np.vstack([np.eye(len(S) - 1), -np.ones(len(S) - 1)])
        Hr = B.T @ H @ B
        gr = B.T @ g
        step = B @ np.linalg.lstsq(Hr, -gr, rcond=None)[0]
        if not np.all(np.isfinite(step)) or np.max(np.abs(step)) < 1e-16:
            return w
        t = 1.0
        neg = step < 0
        if neg.any():
            t = min(1.0, float(np.min(w[S][neg] / -step[neg])))
        f0 = objective(w)
        while t > 1e-12:
            cand = w.copy()
            cand[S] = np.maximum(w[S] + t * step, 0.0)
            cand /= cand.sum()
            if objective(cand) <= f0:
                break
            t *= 0.5
        else:
            return w
        if np.max(np.abs(cand - w)) < 1e-15:
            return cand
        w = cand
    return w


@dataclass(frozen=True)
class SuperLearnerFit:
    library: tuple[LearnerSpec, ...]
    weights: np.ndarray
    cv_risks: np.ndarray
    full_fits: tuple[LearnerFit | None, ...]
    folds: FoldAssignment
    loss: Loss
    ensemble_cv_risk: float
    heldout: np.ndarray = field(repr=False)

    def predict(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        out = np.zeros(X.shape[0])
        for wj, fj in zip(self.weights, self.full_fits):
            if wj > 0 and fj is not None:
                out += wj * predict(fj, X)
        return out

    def summary(self) -> list[dict]:
        return [
            {
                "learner": spec.label,
                "weight": float(w),
                "cv_risk": None if not np.isfinite(r) else float(r),
                "dropped": self.full_fits[j] is None,
            }
            for j, (spec, w, r) in enumerate(zip(self.library, self.weights, self.cv_risks))
        ]


def fit_super_learner(library: Sequence[LearnerSpec], X, y, folds: FoldAssignment, loss: Loss = NLL, n_jobs: int = 1) -> SuperLearnerFit:
    """Cross-validate the library, solve the convex weights, refit on all rows."""
    library = tuple(library)
    if not library:
        raise SuperLearnerError("super learner library is empty")
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    Z, risks, kept = cv_predictions(library, X, y, folds, loss, n_jobs)
    if not kept:
        raise SuperLearnerError("every learner in the library failed")
    w_kept = solve_weights(Z, y, loss)
    weights = np.zeros(len(library))
    weights[kept] = w_kept
    full: list[LearnerFit | None] = [None] * len(library)
    for j in kept:
        try:
            full[j] = fit(library[j], X, y)
        except Exception as exc:  # noqa: BLE001
            if weights[j] > 0:
                raise SuperLearnerError(f"learner {library[j].label} failed on the full data: {exc}") from exc
            warnings.warn(f"learner {library[j].label} failed on the full data: {exc}", SuperLearnerWarning, stacklevel=2)
    heldout = np.full((len(y), len(library)), np.nan)
    heldout[:, kept] = Z
    return SuperLearnerFit(
        library=library,
        weights=weights,
        cv_risks=risks,
        full_fits=tuple(full),
        folds=folds,
        loss=loss,
        ensemble_cv_risk=loss(y, Z @ w_kept),
        heldout=heldout,
    )
