"""Known-truth data generation and replication studies.

Random numbers come from numpy's PCG64 (``np.random.default_rng``). Replicate
``i`` of a study with base seed ``s`` uses seed ``s + i`` for both data
generation and fold assignment, so any replicate can be rerun on its own.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
import pandas as pd
from scipy.special import expit

from .data_model import ColumnSpec, Dataset, design_matrix
from .learners import LearnerSpec, irls_logistic, parse_learner
from .super_learner import DEFAULT_SEED, make_folds
from .tmle import DEFAULT_Q_BOUND, Z95, estimate, fit_nuisances, gcomp_estimate


class DgpError(ValueError):
    pass


class ReplicationError(RuntimeError):
    def __init__(self, index: int, seed: int, cause: Exception):
        super().__init__(f"replicate {index} (seed {seed}) failed: {cause}")
        self.index = index
        self.seed = seed


_DISTRIBUTIONS = {
    "bernoulli": ("p",),
    "uniform": ("low", "high"),
    "normal": ("mean", "sd"),
}


@dataclass(frozen=True)
class Covariate:
    name: str
    distribution: str
    params: Mapping[str, float]
    clip: tuple[float, float] | None = None

    def __post_init__(self):
        if self.distribution not in _DISTRIBUTIONS:
            raise DgpError(f"{self.name}: unknown distribution {self.distribution!r}")
        need = set(_DISTRIBUTIONS[self.distribution])
        if set(self.params) != need:
            raise DgpError(f"{self.name}: {self.distribution} needs parameters {sorted(need)}, got {sorted(self.params)}")
        p = {k: float(v) for k, v in self.params.items()}
        if self.distribution == "bernoulli" and not 0 <= p["p"] <= 1:
            raise DgpError(f"{self.name}: bernoulli p must lie in [0, 1]")
        if self.distribution == "uniform" and not p["low"] < p["high"]:
            raise DgpError(f"{self.name}: uniform needs low < high")
        if self.distribution == "normal" and not p["sd"] > 0:
            raise DgpError(f"{self.name}: normal sd must be positive")
        if self.clip is not None and not self.clip[0] < self.clip[1]:
            raise DgpError(f"{self.name}: clip bounds must be increasing")
        object.__setattr__(self, "params", p)

    @property
    def binary(self) -> bool:
        return self.distribution == "bernoulli"

    def draw(self, rng: np.random.Generator, n: int) -> np.ndarray:
        p = self.params
        if self.distribution == "bernoulli":
            x = (rng.random(n) < p["p"]).astype(float)
        elif self.distribution == "uniform":
            x = rng.uniform(p["low"], p["high"], n)
        else:
            x = rng.normal(p["mean"], p["sd"], n)
        if self.clip is not None:
            x = np.clip(x, *self.clip)
        return x


@dataclass(frozen=True)
class LogisticModel:
    """``expit(intercept + sum coef * term)``; a term is a variable or ``"X:Y"`` product."""

    intercept: float
    terms: Mapping[str, float] = field(default_factory=dict)

    def variables(self) -> set[str]:
        return {v for t in self.terms for v in t.split(":")}

    def linear_predictor(self, values: Mapping[str, np.ndarray], n: int) -> np.ndarray:
        eta = np.full(n, float(self.intercept))
        for term, coef in self.terms.items():
            prod = np.ones(n)
            for v in term.split(":"):
                prod = prod * values[v]
            eta += coef * prod
        return eta

    def prob(self, values, n) -> np.ndarray:
        return expit(self.linear_predictor(values, n))


@dataclass(frozen=True)
class DgpSpec:
    covariates: tuple[Covariate, ...]
    treatment: LogisticModel
    outcome: LogisticModel
    seed: int = 42
    treatment_name: str = "A"
    outcome_name: str = "Y"

    def __post_init__(self):
        names = [c.name for c in self.covariates]
        if len(set(names)) != len(names):
            raise DgpError("duplicate covariate names")
        if self.treatment_name in names or self.outcome_name in names:
            raise DgpError("covariate names must differ from the treatment and outcome names")
        stray = self.treatment.variables() - set(names)
        if stray:
            raise DgpError(f"treatment model references undeclared variables {sorted(stray)}")
        stray = self.outcome.variables() - set(names) - {self.treatment_name}
        if stray:
            raise DgpError(f"outcome model references undeclared variables {sorted(stray)}")

    @property
    def covariate_names(self) -> list[str]:
        return [c.name for c in self.covariates]

    def draw_covariates(self, rng, n) -> dict[str, np.ndarray]:
        return {c.name: c.draw(rng, n) for c in self.covariates}

    def g0(self, W: Mapping[str, np.ndarray], n: int) -> np.ndarray:
        return self.treatment.prob(W, n)

    def Q0(self, a, W: Mapping[str, np.ndarray], n: int) -> np.ndarray:
        values = dict(W)
        values[self.treatment_name] = np.broadcast_to(np.asarray(a, dtype=float), (n,))
        return self.outcome.prob(values, n)


DGP_A = DgpSpec(
    covariates=(
        Covariate("W1", "bernoulli", {"p": 0.4}),
        Covariate("W2", "uniform", {"low": 0.0, "high": 1.0}),
        Covariate("W3", "normal", {"mean": 0.0, "sd": 1.0}, clip=(-3.0, 3.0)),
    ),
    treatment=LogisticModel(-0.4, {"W1": 0.8, "W2": 0.6, "W3": -0.3}),
    outcome=LogisticModel(-1.2, {"A": 0.9, "W1": 0.5, "W2": -0.7, "W3": 0.4, "A:W1": 0.4}),
    seed=42,
)


def generate(dgp: DgpSpec, n: int, seed: int | None = None) -> Dataset:
    """Draw ``W``, then ``A ~ Bernoulli(g0(W))``, then ``Y ~ Bernoulli(Q0(A, W))``."""
    if n < 1:
        raise DgpError("n must be positive")
    rng = np.random.default_rng(dgp.seed if seed is None else seed)
    W = dgp.draw_covariates(rng, n)
    g = dgp.g0(W, n)
    if np.any((g <= 0) | (g >= 1)):
        raise DgpError("treatment probabilities reach 0 or 1")
    A = (rng.random(n) < g).astype(float)
    Y = (rng.random(n) < dgp.Q0(A, W, n)).astype(float)
    frame = pd.DataFrame({**W, dgp.treatment_name: A, dgp.outcome_name: Y})
    specs = [ColumnSpec(c.name, "covariate", "baseline", "binary" if c.binary else "continuous") for c in dgp.covariates]
    specs.append(ColumnSpec(dgp.treatment_name, "treatment", "baseline", "binary"))
    specs.append(ColumnSpec(dgp.outcome_name, "outcome", "post_treatment", "binary"))
    return Dataset(frame, tuple(specs), source=f"dgp(seed={seed})")


@dataclass(frozen=True)
class TrueEffect:
    rd: float
    rr: float
    odds_ratio: float
    mu1: float
    mu0: float
    rd_mc_se: float
    mc_size: int


def true_psi(dgp: DgpSpec, mc_size: int = 1_000_000, seed: int | None = None) -> TrueEffect:
    """Monte-Carlo value of ``E[Q0(1, W) - Q0(0, W)]`` with its Monte-Carlo SE."""
    if mc_size < 100_000:
        raise DgpError("mc_size must be at least 1e5")
    rng = np.random.default_rng(dgp.seed if seed is None else seed)
    W = dgp.draw_covariates(rng, mc_size)
    q1, q0 = dgp.Q0(1.0, W, mc_size), dgp.Q0(0.0, W, mc_size)
    diff = q1 - q0
    mu1, mu0 = float(q1.mean()), float(q0.mean())
    return TrueEffect(
        rd=float(diff.mean()),
        rr=mu1 / mu0,
        odds_ratio=mu1 * (1 - mu0) / (mu0 * (1 - mu1)),
        mu1=mu1,
        mu0=mu0,
        rd_mc_se=float(diff.std(ddof=1) / math.sqrt(mc_size)),
        mc_size=mc_size,
    )


# ---------------------------------------------------------------------------
# replication


ESTIMATOR_KINDS = ("tmle", "gcomp", "parametric", "oracle")


@dataclass(frozen=True)
class EstimatorConfig:
    name: str
    kind: str = "tmle"
    q_library: tuple[LearnerSpec, ...] = ()
    g_library: tuple[LearnerSpec, ...] = ()
    V: int = 10
    g_bound: float | None = None
    q_bound: float = DEFAULT_Q_BOUND
    stratify: bool = True

    def __post_init__(self):
        if self.kind not in ESTIMATOR_KINDS:
            raise ValueError(f"estimator {self.name!r}: unknown kind {self.kind!r}")
        lib = lambda xs: tuple(parse_learner(x) if isinstance(x, str) else x for x in xs)  # noqa: E731
        object.__setattr__(self, "q_library", lib(self.q_library))
        object.__setattr__(self, "g_library", lib(self.g_library))
        if self.kind in ("tmle", "gcomp") and not self.q_library:
            raise ValueError(f"estimator {self.name!r} needs a q_library")
        if self.kind == "tmle" and not self.g_library:
            raise ValueError(f"estimator {self.name!r} needs a g_library")


@dataclass(frozen=True)
class EstimatorSummary:
    name: str
    kind: str
    reps: int
    mean_estimate: float
    mean_bias: float
    sd: float | None
    mean_se: float | None
    coverage: float | None
    mean_ci_width: float | None
    max_abs_ic_mean: float | None

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass(frozen=True)
class ReplicationSummary:
    truth: float
    n: int
    reps: int
    seed: int
    estimators: dict[str, EstimatorSummary]
    estimates: dict[str, np.ndarray] = field(repr=False)
    ses: dict[str, np.ndarray] = field(repr=False)

    def __getitem__(self, name: str) -> EstimatorSummary:
        return self.estimators[name]

    def to_dict(self) -> dict:
        return {
            "truth_rd": self.truth,
            "n": self.n,
            "reps": self.reps,
            "seed": self.seed,
            "estimators": {k: v.to_dict() for k, v in self.estimators.items()},
        }


def _gcomp_parametric(ds: Dataset, W: np.ndarray) -> float:
    A = ds.A
    X = np.column_stack([np.ones_like(A), A, W])
    coef = irls_logistic(X, ds.Y).coef
    X1, X0 = X.copy(), X.copy()
    X1[:, 1], X0[:, 1] = 1.0, 0.0
    return float(np.mean(expit(X1 @ coef) - expit(X0 @ coef)))


def run_replicate(dgp: DgpSpec, n: int, seed: int, configs: Sequence[EstimatorConfig], truth: float):
    """One replicate: returns ``{name: (estimate, se, ic_mean)}``."""
    import warnings

    ds = generate(dgp, n, seed)
    adj = dgp.covariate_names
    out = {}
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        for cfg in configs:
            if cfg.kind == "oracle":
                out[cfg.name] = (truth, None, None)
                continue
            if cfg.kind == "parametric":
                W, _ = design_matrix(ds, adj)
                out[cfg.name] = (_gcomp_parametric(ds, W), None, None)
                continue
            folds = make_folds(ds.n, cfg.V, seed, stratify=ds.Y if cfg.stratify else None)
            g_lib = cfg.g_library or (LearnerSpec("intercept_only"),)
            nuis = fit_nuisances(ds, adj, cfg.q_library, g_lib, folds, cfg.g_bound, cfg.q_bound)
            if cfg.kind == "gcomp":
                out[cfg.name] = (gcomp_estimate(nuis), None, None)
            else:
                res = estimate(ds, nuis)
                out[cfg.name] = (res.psi_rd, res.se["rd"], res.ic_mean)
    return out


def _safe_replicate(args):
    i, dgp, n, seed, configs, truth = args
    try:
        return run_replicate(dgp, n, seed, configs, truth)
    except Exception as exc:  # noqa: BLE001
        return ReplicationError(i, seed, exc)


def replicate_study(
    dgp: DgpSpec,
    n: int,
    reps: int,
    estimators: Sequence[EstimatorConfig],
    seed: int = DEFAULT_SEED,
    truth: float | None = None,
    mc_size: int = 1_000_000,
    n_jobs: int = 1,
) -> ReplicationSummary:
    """Generate ``reps`` datasets, apply every estimator, summarise against the truth."""
    if reps < 1:
        raise ValueError("reps must be >= 1")
    names = [e.name for e in estimators]
    if len(set(names)) != len(names):
        raise ValueError("estimator names must be unique")
    if truth is None:
        truth = true_psi(dgp, mc_size).rd
    jobs = [(i, dgp, n, seed + i, tuple(estimators), truth) for i in range(reps)]
    if n_jobs > 1:
        with ProcessPoolExecutor(max_workers=n_jobs) as pool:
            results = list(pool.map(_safe_replicate, jobs, chunksize=max(1, reps // (4 * n_jobs))))
    else:
        results = []
        for job in jobs:
            results.append(_safe_replicate(job))
            if isinstance(results[-1], ReplicationError):
                break
    for r in results:
        if isinstance(r, ReplicationError):
            raise r

    est = {k: np.array([r[k][0] for r in results], dtype=float) for k in names}
    ses = {k: np.array([np.nan if r[k][1] is None else r[k][1] for r in results], dtype=float) for k in names}
    icm = {k: np.array([np.nan if r[k][2] is None else r[k][2] for r in results], dtype=float) for k in names}
    summaries = {}
    for cfg in estimators:
        e, s = est[cfg.name], ses[cfg.name]
        has_se = bool(np.all(np.isfinite(s)))
        lo, hi = e - Z95 * s, e + Z95 * s
        summaries[cfg.name] = EstimatorSummary(
            name=cfg.name,
            kind=cfg.kind,
            reps=reps,
            mean_estimate=float(e.mean()),
            mean_bias=float(e.mean() - truth),
            sd=float(e.std(ddof=1)) if reps > 1 else None,
            mean_se=float(s.mean()) if has_se else None,
            coverage=float(np.mean((lo <= truth) & (truth <= hi))) if has_se else None,
            mean_ci_width=float(np.mean(hi - lo)) if has_se else None,
            max_abs_ic_mean=float(np.max(np.abs(icm[cfg.name]))) if np.all(np.isfinite(icm[cfg.name])) else None,
        )
    return ReplicationSummary(float(truth), n, reps, seed, summaries, est, ses)


def e8_dataset() -> Dataset:
    """Eight-row saturated fixture with a stratified risk difference of exactly 0.5."""
    rows = [
        # W, A, Y
        (0, 1, 1), (0, 1, 0), (0, 0, 0), (0, 0, 0),
        (1, 1, 1), (1, 1, 1), (1, 0, 1), (1, 0, 0),
    ]
    frame = pd.DataFrame(rows, columns=["W", "A", "Y"]).astype(float)
    specs = (
        ColumnSpec("W", "covariate", "baseline", "binary"),
        ColumnSpec("A", "treatment", "baseline", "binary"),
        ColumnSpec("Y", "outcome", "post_treatment", "binary"),
    )
    return Dataset(frame, specs, source="E8")


def stratified_rd(ds: Dataset, stratum: str) -> float:
    """Nonparametric standardised risk difference over a discrete covariate."""
    W = ds.values(stratum)
    A, Y = ds.A, ds.Y
    total = 0.0
    for w in np.unique(W):
        m = W == w
        total += m.mean() * (Y[m & (A == 1)].mean() - Y[m & (A == 0)].mean())
    return float(total)
