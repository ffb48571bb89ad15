"""Base prediction algorithms for the super learner library.

Every learner is addressed by a :class:`LearnerSpec` and fitted with
:func:`fit`, which returns an immutable :class:`LearnerFit`. All kinds except
``linear`` model a probability with a logit link and accept an offset on the
linear-predictor scale.

Kinds
-----
intercept_only
    Weighted mean of the response (logit-scale intercept when an offset is given).
linear
    Weighted least squares.
logistic
    Maximum likelihood logistic regression by IRLS.
lasso_logistic
    L1-penalised logistic regression, coordinate descent along a lambda path,
    penalty chosen by internal K-fold cross-validation.
spline_logistic
    Logistic regression on natural cubic spline bases of the non-binary columns.
boosted_stumps
    Gradient boosting of depth-1 trees under binomial deviance.
stratified_mean
    Mean response within each distinct covariate row (a saturated fit for
    discrete covariates); unseen rows fall back to the overall mean.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from types import MappingProxyType
from typing import Any, Mapping

import numpy as np
from scipy.special import expit, logit

CLIP = 1e-6

IRLS_MAX_ITER = 100
IRLS_TOL = 1e-8


class LearnerError(ValueError):
    pass


class LearnerWarning(UserWarning):
    pass


class ConvergenceWarning(LearnerWarning):
    pass


# ---------------------------------------------------------------------------
# losses


_LOSS_ALIASES = {
    "nll": "negative_log_likelihood",
    "negative_log_likelihood": "negative_log_likelihood",
    "log_loss": "negative_log_likelihood",
    "squared_error": "squared_error",
    "mse": "squared_error",
}


@dataclass(frozen=True)
class Loss:
    kind: str = "negative_log_likelihood"

    def __post_init__(self):
        try:
            object.__setattr__(self, "kind", _LOSS_ALIASES[self.kind])
        except KeyError:
            raise LearnerError(f"unknown loss {self.kind!r}") from None

    def pointwise(self, y, pred) -> np.ndarray:
        y = np.asarray(y, dtype=float)
        pred = np.asarray(pred, dtype=float)
        if self.kind == "squared_error":
            return (y - pred) ** 2
        p = np.clip(pred, CLIP, 1 - CLIP)
        return -(y * np.log(p) + (1 - y) * np.log1p(-p))

    def __call__(self, y, pred, weights=None) -> float:
        losses = self.pointwise(y, pred)
        if weights is None:
            return float(np.mean(losses))
        w = np.asarray(weights, dtype=float)
        return float(np.sum(w * losses) / np.sum(w))

    def derivatives(self, y, pred) -> tuple[np.ndarray, np.ndarray]:
        """First and second derivative of the pointwise loss in ``pred``."""
        y = np.asarray(y, dtype=float)
        if self.kind == "squared_error":
            return 2 * (pred - y), np.full_like(pred, 2.0)
        p = np.clip(pred, CLIP, 1 - CLIP)
        inside = (pred > CLIP) & (pred < 1 - CLIP)
        d1 = np.where(inside, -y / p + (1 - y) / (1 - p), 0.0)
        d2 = np.where(inside, y / p**2 + (1 - y) / (1 - p) ** 2, 0.0)
        return d1, d2


NLL = Loss("negative_log_likelihood")
SQUARED_ERROR = Loss("squared_error")


# ---------------------------------------------------------------------------
# specs

_DEFAULTS: dict[str, dict[str, float]] = {
    "intercept_only": {},
    "linear": {"interact": 0},
    "logistic": {"interact": 0, "max_iter": IRLS_MAX_ITER},
    "lasso_logistic": {"interact": 0, "n_lambda": 50, "lambda_min_ratio": 1e-3, "cv_folds": 5, "seed": 0},
    "spline_logistic": {"knots": 3},
    "boosted_stumps": {"rounds": 100, "lr": 0.1, "max_depth": 1, "min_leaf": 1},
    "stratified_mean": {},
}
_OPTIONAL = {"lasso_logistic": {"lambda"}}

KINDS = tuple(_DEFAULTS)


@dataclass(frozen=True)
class LearnerSpec:
    kind: str
    hyperparameters: Mapping[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in _DEFAULTS:
            raise LearnerError(f"unknown learner kind {self.kind!r} (expected one of {KINDS})")
        allowed = set(_DEFAULTS[self.kind]) | _OPTIONAL.get(self.kind, set())
        unknown = set(self.hyperparameters) - allowed
        if unknown:
            raise LearnerError(f"{self.kind}: unknown hyperparameters {sorted(unknown)}")
        hp = {**_DEFAULTS[self.kind], **{k: float(v) for k, v in self.hyperparameters.items()}}
        _check_hyperparameters(self.kind, hp)
        object.__setattr__(self, "hyperparameters", MappingProxyType(hp))

    def __reduce__(self):
        # mappingproxy does not pickle; rebuild from a plain dict in worker processes
        return (LearnerSpec, (self.kind, dict(self.hyperparameters)))

    def __getitem__(self, key: str) -> float:
        return self.hyperparameters[key]

    def __hash__(self):
        return hash((self.kind, tuple(sorted(self.hyperparameters.items()))))

    def __eq__(self, other):
        if not isinstance(other, LearnerSpec):
            return NotImplemented
        return self.kind == other.kind and dict(self.hyperparameters) == dict(other.hyperparameters)

    @property
    def label(self) -> str:
        changed = {k: v for k, v in self.hyperparameters.items() if _DEFAULTS[self.kind].get(k) != v}
        if not changed:
            return self.kind
        return self.kind + ":" + ",".join(f"{k}={v:g}" for k, v in sorted(changed.items()))

    @property
    def family(self) -> str:
        return "gaussian" if self.kind == "linear" else "binomial"


def _check_hyperparameters(kind: str, hp: dict) -> None:
    def need(cond, msg):
        if not cond:
            raise LearnerError(f"{kind}: {msg}")

    if "interact" in hp:
        need(hp["interact"] in (0, 1), "interact must be 0 or 1")
    if kind == "logistic":
        need(hp["max_iter"] >= 1 and hp["max_iter"] == int(hp["max_iter"]), "max_iter must be a positive integer")
    if kind == "lasso_logistic":
        need(hp["n_lambda"] >= 1 and hp["n_lambda"] == int(hp["n_lambda"]), "n_lambda must be a positive integer")
        need(0 < hp["lambda_min_ratio"] < 1, "lambda_min_ratio must lie in (0, 1)")
        need(hp["cv_folds"] >= 2 and hp["cv_folds"] == int(hp["cv_folds"]), "cv_folds must be an integer >= 2")
        if "lambda" in hp:
            need(hp["lambda"] >= 0, "lambda must be non-negative")
    if kind == "spline_logistic":
        need(hp["knots"] >= 0 and hp["knots"] == int(hp["knots"]), "knots must be a non-negative integer")
    if kind == "boosted_stumps":
        need(hp["rounds"] >= 0 and hp["rounds"] == int(hp["rounds"]), "rounds must be a non-negative integer")
        need(0 < hp["lr"] <= 1, "lr must lie in (0, 1]")
        need(hp["max_depth"] == 1, "only depth-1 trees (stumps) are supported")
        need(hp["min_leaf"] >= 1, "min_leaf must be >= 1")


_KEY_ALIASES = {"learning_rate": "lr", "n_rounds": "rounds", "depth": "max_depth"}


def parse_learner(text: str) -> LearnerSpec:
    """Parse ``"kind"`` or ``"kind:key=value,key=value"``."""
    kind, _, rest = text.strip().partition(":")
    hp = {}
    for item in filter(None, (s.strip() for s in rest.split(","))):
        key, sep, value = item.partition("=")
        if not sep:
            raise LearnerError(f"bad learner option {item!r} in {text!r}; expected key=value")
        key = _KEY_ALIASES.get(key.strip(), key.strip())
        try:
            hp[key] = float(value)
        except ValueError:
            raise LearnerError(f"learner option {key!r} in {text!r} must be numeric") from None
    return LearnerSpec(kind.strip(), hp)


@dataclass(frozen=True)
class LearnerFit:
    spec: LearnerSpec
    parameters: Mapping[str, Any]
    training_loss: float
    converged: bool
    n_features: int

    def __post_init__(self):
        if not isinstance(self.parameters, MappingProxyType):
            object.__setattr__(self, "parameters", MappingProxyType(dict(self.parameters)))

    def __reduce__(self):
        return (LearnerFit, (self.spec, dict(self.parameters), self.training_loss, self.converged, self.n_features))


# ---------------------------------------------------------------------------
# logistic likelihood


def logistic_nll(beta, X, y, weights=None, offset=None) -> float:
    """Weighted mean negative log-likelihood of a logistic model ``expit(offset + X @ beta)``."""
    eta = X @ beta if offset is None else offset + X @ beta
    w = np.ones(len(y)) if weights is None else weights
    return float(np.sum(w * (np.logaddexp(0.0, eta) - y * eta)) / np.sum(w))


def logistic_nll_grad(beta, X, y, weights=None, offset=None) -> np.ndarray:
    eta = X @ beta if offset is None else offset + X @ beta
    w = np.ones(len(y)) if weights is None else weights
    return X.T @ (w * (expit(eta) - y)) / np.sum(w)


def lasso_objective(intercept, beta, X, y, lam, weights=None, offset=None) -> float:
    """Penalised objective minimised by :func:`lasso_path` (unpenalised intercept)."""
    Xi = np.column_stack([np.ones(len(y)), X])
    return logistic_nll(np.r_[intercept, beta], Xi, y, weights, offset) + lam * np.sum(np.abs(beta))


def lasso_objective_grad(intercept, beta, X, y, lam, weights=None, offset=None) -> np.ndarray:
    """Gradient of :func:`lasso_objective`; valid where no coefficient is exactly zero."""
    Xi = np.column_stack([np.ones(len(y)), X])
    g = logistic_nll_grad(np.r_[intercept, beta], Xi, y, weights, offset)
    g[1:] += lam * np.sign(beta)
    return g


@dataclass
class IrlsResult:
    coef: np.ndarray
    converged: bool
    separated: bool
    n_iter: int
    deviance: float


def irls_logistic(X, y, weights=None, offset=None, max_iter=IRLS_MAX_ITER, tol=IRLS_TOL) -> IrlsResult:
    """Newton-Raphson (IRLS) for logistic regression, no implicit intercept.

    Converged means the relative deviance change fell below ``tol`` and the
    coefficient step became small. Complete or quasi-complete separation makes
    coefficients drift without bound; the loop then stops at ``max_iter`` with
    ``converged=False`` and finite (possibly extreme) coefficients.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    n, p = X.shape
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=float)
    off = np.zeros(n) if offset is None else np.asarray(offset, dtype=float)
    beta = np.zeros(p)

    def deviance(b):
        eta = off + X @ b
        return 2.0 * float(np.sum(w * (np.logaddexp(0.0, eta) - y * eta)))

    dev = deviance(beta)
    converged = False
    it = 0
    if p == 0:
        return IrlsResult(beta, True, False, 0, dev)
    for it in range(1, int(max_iter) + 1):
        eta = off + X @ beta
        mu = expit(eta)
        score = X.T @ (w * (y - mu))
        hess = X.T @ ((w * mu * (1 - mu))[:, None] * X)
        try:
            step = np.linalg.solve(hess, score)
            if not np.all(np.isfinite(step)):
                raise np.linalg.LinAlgError
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(hess, score, rcond=None)[0]
        t = 1.0
        while True:
            candidate = beta + t * step
            new_dev = deviance(candidate)
            if new_dev <= dev + 1e-10 * (abs(dev) + 1.0) or t < 1e-8:
                break
            t *= 0.5
        change = abs(dev - new_dev)
        move = float(np.max(np.abs(t * step)))
        beta, dev = candidate, new_dev
        if change < tol * (abs(dev) + 0.1) and move < 1e-4 * (1.0 + float(np.max(np.abs(beta)))):
            converged = True
            break
    lin = X @ beta
    fitted = expit(off + lin)
    separated = bool(np.any((fitted < 1e-10) | (fitted > 1 - 1e-10)) and np.max(np.abs(lin)) > 20)
    if separated:
        converged = False
    return IrlsResult(beta, converged, separated, it, dev)


def _with_intercept(X):
    return np.column_stack([np.ones(X.shape[0]), X])


def _interactions(X, on: bool):
    if not on or X.shape[1] < 2:
        return X
    return np.column_stack([X, X[:, :1] * X[:, 1:]])


def _fit_logistic_matrix(Z, y, w, offset, max_iter=IRLS_MAX_ITER):
    res = irls_logistic(_with_intercept(Z), y, w, offset, max_iter=max_iter)
    if res.separated:
        warnings.warn("logistic fit: fitted probabilities numerically 0 or 1 (separation)", ConvergenceWarning, stacklevel=3)
    elif not res.converged:
        warnings.warn(f"logistic fit did not converge in {res.n_iter} iterations", ConvergenceWarning, stacklevel=3)
    return res


# ---------------------------------------------------------------------------
# linear


def _wls(Z, y, w):
    Xi = _with_intercept(Z)
    xtwx = Xi.T @ (w[:, None] * Xi)
    xtwy = Xi.T @ (w * y)
    cond = np.linalg.cond(xtwx) if xtwx.size else 1.0
    if not np.isfinite(cond) or cond > 1e12:
        jitter = 1e-8 * max(np.trace(xtwx) / xtwx.shape[0], 1.0)
        warnings.warn(f"singular design in linear fit; ridge jitter {jitter:.3g} applied", LearnerWarning, stacklevel=3)
        xtwx = xtwx + jitter * np.eye(xtwx.shape[0])
    return np.linalg.solve(xtwx, xtwy)


# ---------------------------------------------------------------------------
# lasso


@dataclass(frozen=True)
class LassoPath:
    lambdas: np.ndarray
    intercepts: np.ndarray
    coefs: np.ndarray
    converged: np.ndarray

    def predict(self, X, index: int, offset=None, family="binomial"):
        eta = self.intercepts[index] + X @ self.coefs[index]
        if offset is not None:
            eta = eta + offset
        return expit(eta) if family == "binomial" else eta


def _standardize(X, w):
    mean = w @ X
    sd = np.sqrt(w @ (X - mean) ** 2)
    return mean, sd


def lambda_max(X, y, loss: Loss = NLL, weights=None, offset=None) -> float:
    """Smallest penalty at which every lasso coefficient is zero."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    w = np.ones(len(y)) if weights is None else np.asarray(weights, dtype=float)
    w = w / w.sum()
    mean, sd = _standardize(X, w)
    ok = sd > 0
    Xs = np.zeros_like(X)
    Xs[:, ok] = (X[:, ok] - mean[ok]) / sd[ok]
    if loss.kind == "squared_error":
        resid = y - (0 if offset is None else offset)
        resid = resid - w @ resid
    else:
        b0 = _intercept_only_logit(y, w, offset)
        mu = expit(b0 + (0 if offset is None else offset))
        resid = y - mu
    return float(np.max(np.abs(Xs.T @ (w * resid)))) if X.shape[1] else 0.0


def _intercept_only_logit(y, w, offset):
    if offset is None:
        m = float(np.clip(w @ y / w.sum(), 1e-12, 1 - 1e-12))
        return float(logit(m))
    return float(irls_logistic(np.ones((len(y), 1)), y, w, offset).coef[0])


def _soft(z, t):
    return np.sign(z) * max(abs(z) - t, 0.0)


def _support_solve(Xs, z, v, lam, beta, active):
    """Exact minimiser when the support and signs of ``beta`` are already right.

    Solves the stationarity equations on the current support and accepts the
    result only if the signs agree and every excluded coordinate satisfies
    ``|x_j' V r| <= lam``. Returns ``None`` otherwise.
    """
    support = [j for j in active if beta[j] != 0.0]
    signs = np.sign(beta[support])
    M = np.column_stack([np.ones(len(z)), Xs[:, support]])
    lhs = M.T @ (v[:, None] * M)
    rhs = M.T @ (v * z) - np.r_[0.0, lam * signs]
    try:
        theta = np.linalg.solve(lhs, rhs)
    except np.linalg.LinAlgError:
        return None
    if not np.all(np.isfinite(theta)) or np.any(np.sign(theta[1:]) != signs):
        return None
    r = z - M @ theta
    outside = [j for j in active if beta[j] == 0.0]
    if outside and np.max(np.abs(Xs[:, outside].T @ (v * r))) > lam * (1 + 1e-9) + 1e-15:
        return None
    new = np.zeros_like(beta)
    new[support] = theta[1:]
    return float(theta[0]), new


def _cd_weighted_ls(Xs, z, v, lam, b0, beta, active, max_sweeps=10000, tol=1e-13):
    """Coordinate descent on 0.5 * sum v (z - b0 - Xs beta)^2 + lam * |beta|_1.

    Once a sweep leaves the support unchanged the stationarity equations are
    solved exactly on it, which avoids the slow linear convergence of plain
    coordinate descent on nearly collinear columns.
    """
    r = z - b0 - Xs @ beta
    denom = (v[:, None] * Xs**2).sum(axis=0)
    vsum = v.sum()
    for _ in range(max_sweeps):
        max_delta = 0.0
        d0 = (v @ r) / vsum
        b0 += d0
        r -= d0
        max_delta = abs(d0)
        before = beta != 0.0
        for j in active:
            if denom[j] <= 0:
                continue
            xj = Xs[:, j]
            old = beta[j]
            rho = (v * xj) @ r + denom[j] * old
            new = _soft(rho, lam) / denom[j]
            if new != old:
                r -= xj * (new - old)
                beta[j] = new
                max_delta = max(max_delta, abs(new - old) * math.sqrt(denom[j] / vsum))
        if max_delta < tol:
            break
        if np.array_equal(before, beta != 0.0):
            exact = _support_solve(Xs, z, v, lam, beta, active)
            if exact is not None:
                return exact
    return b0, beta


def lasso_path(X, y, lambda_grid, loss: Loss = NLL, weights=None, offset=None, tol=1e-10, max_outer=200) -> LassoPath:
    """L1-penalised path by coordinate descent with warm starts.

    Columns are standardised internally (weighted mean 0, variance 1) and the
    coefficients are returned on the original scale. The objective is
    ``mean_w(loss) + lambda * |beta|_1`` with ``0.5 * squared error`` for the
    gaussian case, the intercept unpenalised.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    lambdas = np.asarray(lambda_grid, dtype=float)
    if lambdas.ndim != 1 or lambdas.size == 0:
        raise LearnerError("lambda grid must be a non-empty vector")
    if np.any(lambdas < 0) or not np.all(np.isfinite(lambdas)):
        raise LearnerError("lambda values must be finite and non-negative")
    n, p = X.shape
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=float)
    w = w / w.sum()
    off = np.zeros(n) if offset is None else np.asarray(offset, dtype=float)
    mean, sd = _standardize(X, w)
    ok = sd > 1e-12 * (1 + np.abs(mean))
    Xs = np.zeros_like(X)
    Xs[:, ok] = (X[:, ok] - mean[ok]) / sd[ok]
    active = np.flatnonzero(ok)
    gaussian = loss.kind == "squared_error"

    b0 = float(w @ (y - off)) if gaussian else _intercept_only_logit(y, w, offset)
    beta = np.zeros(p)
    out_b0, out_beta, out_conv = [], [], []
    for lam in lambdas:
        converged = True
        if gaussian:
            b0, beta = _cd_weighted_ls(Xs, y - off, w, lam, b0, beta, active)
        else:
            converged = False
            for _ in range(max_outer):
                eta = off + b0 + Xs @ beta
                mu = expit(eta)
                var = np.maximum(mu * (1 - mu), 1e-10)
                z = b0 + Xs @ beta + (y - mu) / var
                old = np.r_[b0, beta]
                b0, beta = _cd_weighted_ls(Xs, z, w * var, lam, b0, beta.copy(), active)
                if np.max(np.abs(np.r_[b0, beta] - old)) < tol:
                    converged = True
                    break
        coef = np.zeros(p)
        coef[ok] = beta[ok] / sd[ok]
        out_b0.append(b0 - float(coef @ mean))
        out_beta.append(coef)
        out_conv.append(converged)
    return LassoPath(lambdas, np.array(out_b0), np.array(out_beta).reshape(len(lambdas), p), np.array(out_conv))


def default_lambda_grid(X, y, weights=None, offset=None, n_lambda=50, min_ratio=1e-3, loss: Loss = NLL):
    top = lambda_max(X, y, loss, weights, offset)
    if top <= 0:
        return np.array([1.0])
    return np.exp(np.linspace(np.log(top), np.log(top * min_ratio), int(n_lambda)))


def _content_folds(X, y, k, seed):
    """Fold labels that depend on row content, not row order."""
    order = np.lexsort(np.column_stack([X, y]).T[::-1])
    perm = np.random.default_rng(int(seed)).permutation(len(y))
    folds = np.empty(len(y), dtype=int)
    folds[order[perm]] = np.arange(len(y)) % k
    return folds


def _fit_lasso(spec, Z, y, w, offset):
    hp = spec.hyperparameters
    if "lambda" in hp:
        grid = np.array([hp["lambda"]])
        path = lasso_path(Z, y, grid, NLL, w, offset)
        best, cv = 0, None
    else:
        grid = default_lambda_grid(Z, y, w, offset, hp["n_lambda"], hp["lambda_min_ratio"])
        path = lasso_path(Z, y, grid, NLL, w, offset)
        k = int(min(hp["cv_folds"], len(y)))
        folds = _content_folds(Z, y, k, hp["seed"])
        risk = np.zeros(len(grid))
        for f in range(k):
            tr, te = folds != f, folds == f
            off_tr = None if offset is None else offset[tr]
            off_te = None if offset is None else offset[te]
            sub = lasso_path(Z[tr], y[tr], grid, NLL, w[tr], off_tr)
            for i in range(len(grid)):
                risk[i] += np.sum(w[te] * NLL.pointwise(y[te], sub.predict(Z[te], i, off_te)))
        cv = risk / w.sum()
        best = int(np.argmin(cv))
    if not path.converged[best]:
        warnings.warn("lasso coordinate descent did not converge", ConvergenceWarning, stacklevel=3)
    coef = np.r_[path.intercepts[best], path.coefs[best]]
    return {"coef": coef, "lambda": float(grid[best]), "lambdas": grid, "cv_risks": cv}, bool(path.converged[best])


# ---------------------------------------------------------------------------
# natural cubic splines


def natural_spline_basis(x, knots, lo, hi):
    """Nonlinear part of a natural cubic spline basis (the linear term is ``x``).

    ``knots`` are the interior knots; ``lo``/``hi`` the boundary knots. Inputs are
    rescaled to [0, 1] over the boundary range for conditioning.
    """
    if len(knots) == 0:
        return np.empty((len(x), 0))
    scale = hi - lo
    u = (np.asarray(x, dtype=float) - lo) / scale
    xi = np.r_[0.0, (np.asarray(knots) - lo) / scale, 1.0]
    K = len(xi)

    def d(k):
        return (np.maximum(u - xi[k], 0) ** 3 - np.maximum(u - xi[K - 1], 0) ** 3) / (xi[K - 1] - xi[k])

    last = d(K - 2)
    return np.column_stack([d(k) - last for k in range(K - 2)])


def _spline_design(X, layout):
    cols = [X]
    for j, knots, lo, hi in layout:
        cols.append(natural_spline_basis(X[:, j], knots, lo, hi))
    return np.column_stack(cols)


def _spline_layout(X, n_knots):
    layout = []
    if n_knots == 0:
        return layout
    probs = np.arange(1, n_knots + 1) / (n_knots + 1)
    for j in range(X.shape[1]):
        x = X[:, j]
        uniq = np.unique(x)
        if len(uniq) <= 2:
            continue
        lo, hi = float(uniq[0]), float(uniq[-1])
        knots = np.unique(np.quantile(x, probs))
        knots = knots[(knots > lo) & (knots < hi)]
        if len(knots):
            layout.append((j, tuple(float(k) for k in knots), lo, hi))
    return layout


# ---------------------------------------------------------------------------
# boosted stumps


def _best_stump(X, orders, g, h, w, min_leaf):
    best = (-np.inf, -1, 0.0)
    total_g = w @ g
    total_w = w.sum()
    n = len(g)
    for j in range(X.shape[1]):
        o = orders[j]
        xs = X[o, j]
        cg = np.cumsum((w * g)[o])[:-1]
        cw = np.cumsum(w[o])[:-1]
        cnt = np.arange(1, n)
        valid = (xs[1:] > xs[:-1]) & (cnt >= min_leaf) & (n - cnt >= min_leaf) & (cw > 0) & (total_w - cw > 0)
        if not valid.any():
            continue
        with np.errstate(divide="ignore", invalid="ignore"):
            gain = cg**2 / cw + (total_g - cg) ** 2 / (total_w - cw)
        gain = np.where(valid, gain, -np.inf)
        i = int(np.argmax(gain))
        if gain[i] > best[0]:
            best = (gain[i], j, 0.5 * (xs[i] + xs[i + 1]))
    if best[1] < 0:
        return None
    _, j, thr = best
    left = X[:, j] <= thr
    leaf = []
    for side in (left, ~left):
        den = np.sum(w[side] * h[side])
        leaf.append(float(np.sum(w[side] * g[side]) / den) if den > 1e-12 else 0.0)
    return j, float(thr), leaf[0], leaf[1]


def _stumps_eta(params, X):
    eta = np.full(X.shape[0], params["init"])
    lr = params["lr"]
    for j, thr, lv, rv in params["stumps"]:
        eta += lr * np.where(X[:, int(j)] <= thr, lv, rv)
    return eta


def _fit_stumps(spec, X, y, w, offset):
    hp = spec.hyperparameters
    init = _intercept_only_logit(y, w, offset)
    off = np.zeros(len(y)) if offset is None else offset
    eta = off + init
    orders = [np.argsort(X[:, j], kind="stable") for j in range(X.shape[1])]
    stumps = []
    for _ in range(int(hp["rounds"])):
        mu = expit(eta)
        stump = _best_stump(X, orders, y - mu, mu * (1 - mu), w, int(hp["min_leaf"]))
        if stump is None:
            break
        j, thr, lv, rv = stump
        eta = eta + hp["lr"] * np.where(X[:, j] <= thr, lv, rv)
        stumps.append(stump)
    return {"init": init, "lr": hp["lr"], "stumps": tuple(stumps)}


# ---------------------------------------------------------------------------
# fit / predict


def _check_xy(X, y, weights, offset, family):
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    y = np.asarray(y, dtype=float)
    if X.shape[0] != y.shape[0]:
        raise LearnerError(f"X has {X.shape[0]} rows but y has {y.shape[0]}")
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
        raise LearnerError("X and y must be finite")
    if family == "binomial" and np.any((y < 0) | (y > 1)):
        raise LearnerError("probability-scale learners need y in [0, 1]")
    w = np.ones(len(y)) if weights is None else np.asarray(weights, dtype=float)
    if w.shape != y.shape or np.any(w < 0) or not np.all(np.isfinite(w)) or w.sum() <= 0:
        raise LearnerError("weights must be finite, non-negative and not all zero")
    off = None if offset is None else np.asarray(offset, dtype=float)
    if off is not None and (off.shape != y.shape or not np.all(np.isfinite(off))):
        raise LearnerError("offset must be a finite vector of length n")
    return X, y, w, off


def fit(spec: LearnerSpec, X, y, weights=None, offset=None) -> LearnerFit:
    """Fit one learner. Deterministic: identical inputs give identical fits."""
    family = spec.family
    if spec.kind == "intercept_only" and np.any((np.asarray(y) < 0) | (np.asarray(y) > 1)):
        family = "gaussian"
    X, y, w, off = _check_xy(X, y, weights, offset, family)
    hp = spec.hyperparameters
    converged = True
    kind = spec.kind

    if kind == "intercept_only":
        if off is None:
            mean = float(w @ y / w.sum())
            params = {"mean": mean, "family": family}
            if family == "binomial" and 0 < mean < 1:
                params["coef"] = np.array([logit(mean)])
        elif family == "binomial":
            res = irls_logistic(np.ones((len(y), 1)), y, w, off)
            converged = res.converged
            params = {"coef": res.coef, "family": family}
        else:
            params = {"mean": float(w @ (y - off) / w.sum()), "family": family}
    elif kind == "linear":
        Z = _interactions(X, bool(hp["interact"]))
        params = {"coef": _wls(Z, y if off is None else y - off, w), "interact": bool(hp["interact"])}
    elif kind == "logistic":
        Z = _interactions(X, bool(hp["interact"]))
        res = _fit_logistic_matrix(Z, y, w, off, int(hp["max_iter"]))
        params = {"coef": res.coef, "interact": bool(hp["interact"])}
        converged = res.converged
    elif kind == "lasso_logistic":
        Z = _interactions(X, bool(hp["interact"]))
        params, converged = _fit_lasso(spec, Z, y, w, off)
        params["interact"] = bool(hp["interact"])
    elif kind == "spline_logistic":
        layout = _spline_layout(X, int(hp["knots"]))
        res = _fit_logistic_matrix(_spline_design(X, layout), y, w, off)
        params = {"coef": res.coef, "layout": tuple(layout)}
        converged = res.converged
    elif kind == "boosted_stumps":
        params = _fit_stumps(spec, X, y, w, off)
    elif kind == "stratified_mean":
        params = _fit_strata(X, y, w, off)
    else:  # pragma: no cover - guarded by LearnerSpec
        raise LearnerError(kind)

    draft = LearnerFit(spec, MappingProxyType(params), float("nan"), converged, X.shape[1])
    pred = predict(draft, X, offset=off)
    loss = SQUARED_ERROR if family == "gaussian" else NLL
    return LearnerFit(spec, MappingProxyType(params), loss(y, pred, w), converged, X.shape[1])


def _row_keys(X):
    return [tuple(row) for row in X.tolist()]


def _fit_strata(X, y, w, off):
    if off is not None:
        raise LearnerError("stratified_mean does not accept an offset")
    sums: dict = {}
    for key, yi, wi in zip(_row_keys(X), y, w):
        s = sums.setdefault(key, [0.0, 0.0])
        s[0] += wi * yi
        s[1] += wi
    table = {k: v[0] / v[1] for k, v in sums.items() if v[1] > 0}
    return {"table": table, "fallback": float(w @ y / w.sum())}


def predict(fitted: LearnerFit, X, offset=None) -> np.ndarray:
    """Predictions on the response scale (probabilities for logit-link kinds)."""
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    if X.shape[1] != fitted.n_features:
        raise LearnerError(f"column mismatch: fitted on {fitted.n_features} columns, got {X.shape[1]}")
    p = fitted.parameters
    off = 0.0 if offset is None else np.asarray(offset, dtype=float)
    kind = fitted.spec.kind
    if kind == "intercept_only":
        if "mean" in p and offset is None:
            return np.full(X.shape[0], p["mean"])
        if p["family"] == "gaussian":
            return np.full(X.shape[0], p["mean"]) + off
        return expit(p["coef"][0] + off) * np.ones(X.shape[0])
    if kind == "stratified_mean":
        return np.array([p["table"].get(k, p["fallback"]) for k in _row_keys(X)])
    if kind == "boosted_stumps":
        return expit(_stumps_eta(p, X) + off)
    if kind == "spline_logistic":
        Z = _spline_design(X, p["layout"])
    else:
        Z = _interactions(X, p["interact"])
    eta = _with_intercept(Z) @ p["coef"] + off
    return eta if kind == "linear" else expit(eta)
