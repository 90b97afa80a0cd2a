"""Simulated scenarios with known effects, benchmarks and the K sweep.

Random streams: a scenario seed feeds four labelled Philox streams
(``coefficients``, ``covariates``, ``treatment``, ``noise``), so e.g. the
coefficient draw can be held fixed while everything else varies. Trial t
of a benchmark with master seed s uses ``derive_seed(s, "trial-t")``.
"""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from functools import partial
from typing import Optional, Sequence

import numpy as np
from scipy import stats

from .data import Dataset, ScoredSample
from .inference import bootstrap_ci, coverage, mse
from .matching import knn_opposite, match_knn, proxy_ite
from .parallel import ordered_map
from .pipeline import PipelineConfig
from .scores import ScoreModel, fit_logistic, fit_scores, sigmoid
from .seeding import derive_seed, make_rng
from .tree import fit_tree

logger = logging.getLogger(__name__)

SCENARIOS = (1, 2, 3, 4, 5, 6, 7)
METHODS = ("pp", "psm", "prog")
REPORT_SCHEMA_VERSION = 1

S7_LOGIT = np.array([0.4, 0.9, -0.4, -0.7, -0.3, 0.6])
S7_PROG = np.array([0.9, -0.9, 0.2, -0.2, 0.9, -0.9])

# (i, j, weight) with 1-based covariate indices
S2_LOGIT_TERMS = [(1, 3, .5), (2, 4, .7), (3, 5, .5), (4, 6, .7), (5, 7, .5),
                  (1, 6, .5), (2, 3, .7), (3, 4, .5), (4, 5, .5), (5, 6, .5)]
S2_PROG_TERMS = [(1, 3, .5), (2, 4, .7), (3, 8, .5), (4, 9, .7), (8, 10, .5),
                 (1, 9, .5), (2, 3, .7), (3, 4, .5), (4, 8, .5), (8, 9, .5)]
S3_LOGIT_SQ = [(2, 1.0), (4, 1.0), (7, -1.0)]
S3_PROG_SQ = [(2, 1.0), (4, 1.0), (10, -1.0)]

DEFAULT_SIZES = {1: (1000, 2), 2: (3000, 10), 3: (3000, 10), 4: (3000, 10),
                 5: (4000, 10), 6: (1000, 2), 7: (600, 1000)}
FULL_SCALE_7 = (3000, 5000)
MIN_D = {2: 10, 3: 10, 7: 6}


@dataclass(frozen=True)
class ScenarioSpec:
    id: int
    n: int
    d: int
    seed: int = 0
    e_threshold: float = 0.6
    p_threshold: float = 0.0
    coef_seed: Optional[int] = None  # fixes the coefficient draw across seeds

    def __post_init__(self):
        if self.id not in SCENARIOS:
            raise ValueError(f"unsupported scenario {self.id}")
        if self.n < 2 or self.d < 1:
            raise ValueError("n must be >= 2 and d >= 1")
        if self.d < MIN_D.get(self.id, 1):
            raise ValueError(f"scenario {self.id} needs d >= {MIN_D[self.id]}")

    @classmethod
    def default(cls, id: int, seed: int = 0, full_scale: bool = False, **kw) -> "ScenarioSpec":
        n, d = FULL_SCALE_7 if (id == 7 and full_scale) else DEFAULT_SIZES[id]
        return cls(id=id, n=kw.pop("n", n), d=kw.pop("d", d), seed=seed, **kw)


@dataclass(frozen=True)
class Simulation:
    dataset: Dataset
    e: np.ndarray  # true propensity
    p: np.ndarray  # true prognostic score
    beta_e: Optional[np.ndarray] = None
    beta_p: Optional[np.ndarray] = None

    @property
    def active_mass(self) -> float:
        return float(np.mean(self.dataset.tau_true != 0))


def _pairs(X, terms):
    return sum(w * X[:, i - 1] * X[:, j - 1] for i, j, w in terms)


def _squares(X, terms):
    return sum(w * X[:, i - 1] ** 2 for i, w in terms)


def true_effect(spec: ScenarioSpec, e, p) -> np.ndarray:
    """Effect function of the scenario evaluated at true scores."""
    if spec.id in (1, 2, 3, 7):
        return ((e < spec.e_threshold) & (p < spec.p_threshold)).astype(float)
    if spec.id == 4:
        hi_e = e > spec.e_threshold
        hi_p = p > spec.p_threshold
        return hi_e.astype(float) + hi_p.astype(float)
    return np.zeros_like(np.asarray(e, float))


def beta24_pdf(x):
    return stats.beta.pdf(x, 2, 4)


def simulate(spec: ScenarioSpec) -> Simulation:
    """Draw one dataset from the scenario, with its true scores and effects."""
    s = spec.seed
    coef_rng = make_rng(spec.coef_seed if spec.coef_seed is not None else s, "coefficients")
    x_rng = make_rng(s, "covariates")
    z_rng = make_rng(s, "treatment")
    eps_rng = make_rng(s, "noise")
    n, d = spec.n, spec.d
    beta_e = beta_p = None

    if spec.id == 5:
        X = x_rng.standard_normal((n, d))
        p = 1.0 + X.sum(axis=1)
        n_treat = math.ceil(n / 2)
        Z = np.zeros(n)
        Z[z_rng.permutation(n)[:n_treat]] = 1.0
        e = np.full(n, n_treat / n)
        Y = p + eps_rng.normal(0.0, math.sqrt(100.0 - d), n)
        tau = np.zeros(n)
    elif spec.id == 6:
        X = x_rng.uniform(0.0, 1.0, (n, d))
        e = 0.25 * (1.0 + beta24_pdf(X[:, 0]))
        Z = (z_rng.uniform(size=n) < e).astype(float)
        p = 2.0 * X[:, 0] - 1.0
        Y = p + eps_rng.standard_normal(n)
        tau = np.zeros(n)
    else:
        X = x_rng.uniform(0.0, 1.0, (n, d))
        if spec.id == 7:
            logit = X[:, :6] @ S7_LOGIT
            p = X[:, :6] @ S7_PROG
        else:
            beta_e = coef_rng.uniform(-1.0, 1.0, d)
            beta_p = coef_rng.uniform(-1.0, 1.0, d)
            logit = X @ beta_e
            p = X @ beta_p
            if spec.id == 2:
                logit = logit + _pairs(X, S2_LOGIT_TERMS)
                p = p + _pairs(X, S2_PROG_TERMS)
            elif spec.id == 3:
                logit = logit + _squares(X, S3_LOGIT_SQ)
                p = p + _squares(X, S3_PROG_SQ)
        e = sigmoid(logit)
        Z = (z_rng.uniform(size=n) < e).astype(float)
        tau = true_effect(spec, e, p)
        Y = p + Z * tau + eps_rng.standard_normal(n)
    return Simulation(Dataset(X, Z, Y, tau), e, p, beta_e, beta_p)


def generate(spec: ScenarioSpec) -> Dataset:
    return simulate(spec).dataset


# ----------------------------------------------------------------- methods


def baseline_single_score(ds: Dataset, scores: ScoredSample, which: str, K: int,
                          config: PipelineConfig = PipelineConfig(), seed: int = 0):
    """Single-score matching: match and regress on one score only.

    Returns ``(tau_hat, tree)`` where ``tau_hat`` are in-sample predictions.
    """
    if which not in ("propensity", "prognostic"):
        raise ValueError("which must be 'propensity' or 'prognostic'")
    col = scores.e_hat if which == "propensity" else scores.p_hat
    match = knn_opposite(col[:, None], ds.Z, K)
    proxy = proxy_ite(ds, match)
    tree = fit_tree(col[:, None], proxy, config.min_node_size, config.cp_floor,
                    config.tree_folds, seed, config.cp_rule, axes=(which,))
    return tree.predict(col[:, None]), tree


def pp_estimate(ds: Dataset, scores: ScoredSample, K: int,
                config: PipelineConfig = PipelineConfig(), seed: int = 0):
    match = match_knn(ds, scores, K, config.standardize_prognostic)
    proxy = proxy_ite(ds, match)
    tree = fit_tree(scores, proxy, config.min_node_size, config.cp_floor,
                    config.tree_folds, seed, config.cp_rule)
    return tree.predict(scores), tree


def _estimate(method, ds, scores, K, config, seed):
    if method == "pp":
        return pp_estimate(ds, scores, K, config, seed)
    which = {"psm": "propensity", "prog": "prognostic"}[method]
    return baseline_single_score(ds, scores, which, K, config, seed)


def _method_fit_fn(method):
    def fit(resample, config, seed):
        model = fit_scores(resample, config.penalty, config.lasso_folds, seed, config.prognostic_link)
        sc = model.score(resample.X)
        _, tree = _estimate(method, resample, sc, config.resolve_k(resample.n), config, seed)

        def predict(X):
            s = model.score(X)
            if method == "pp":
                return tree.predict(s)
            col = s.e_hat if method == "psm" else s.p_hat
            return tree.predict(col[:, None])

        return predict

    return fit


def method_fit_fn(method: str):
    """Bootstrap-compatible fit function for a benchmark method."""
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}")
    return _MethodFit(method)


class _MethodFit:
    # picklable wrapper so process pools can ship it
    def __init__(self, method):
        self.method = method

    def __call__(self, resample, config, seed):
        return _method_fit_fn(self.method)(resample, config, seed)


# --------------------------------------------------------------- benchmark


@dataclass
class BenchmarkReport:
    scenario: dict
    methods: list
    trials: int
    seed: int
    config: dict
    mse: dict = field(default_factory=dict)  # method -> list (None if failed)
    coverage: dict = field(default_factory=dict)  # method -> list
    runtime: dict = field(default_factory=dict)  # method -> list of seconds
    trial_seeds: list = field(default_factory=list)
    active_mass: list = field(default_factory=list)
    failures: list = field(default_factory=list)
    bootstrap: Optional[dict] = None

    def mean_mse(self, method) -> float:
        vals = [v for v in self.mse[method] if v is not None]
        return float(np.mean(vals)) if vals else float("nan")

    def mean_coverage(self, method) -> float:
        vals = [v for v in self.coverage.get(method, []) if v is not None]
        return float(np.mean(vals)) if vals else float("nan")

    def summary(self) -> dict:
        out = {}
        for m in self.methods:
            vals = np.array([v for v in self.mse[m] if v is not None])
            entry = {"mean_mse": self.mean_mse(m)}
            if vals.size:
                entry["mse_quantiles"] = dict(zip(
                    ("min", "q25", "median", "q75", "max"),
                    np.quantile(vals, [0, .25, .5, .75, 1]).tolist()))
            if self.coverage.get(m):
                entry["mean_coverage"] = self.mean_coverage(m)
            entry["mean_runtime"] = float(np.mean(self.runtime[m])) if self.runtime[m] else None
            out[m] = entry
        return out

    def to_dict(self) -> dict:
        d = asdict(self)
        d = {"schema_version": REPORT_SCHEMA_VERSION, **d, "summary": self.summary()}
        return d

    def to_json(self) -> str:
        return json.dumps(_clean(self.to_dict()), indent=2)


def _clean(obj):
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def _run_trial(t, spec, methods, config, master, boot_B, boot_level, fix_coefficients):
    tseed = derive_seed(master, f"trial-{t}")
    tspec = replace(spec, seed=tseed, coef_seed=master if fix_coefficients else None)
    sim = simulate(tspec)
    ds = sim.dataset
    out = {"seed": tseed, "active_mass": sim.active_mass, "mse": {}, "coverage": {},
           "runtime": {}, "error": None}
    try:
        t0 = time.perf_counter()
        model = fit_scores(ds, config.penalty, config.lasso_folds, tseed, config.prognostic_link)
        scores = model.score(ds.X)
        score_time = time.perf_counter() - t0
        K = config.resolve_k(ds.n)
        for m in methods:
            t1 = time.perf_counter()
            tau_hat, _ = _estimate(m, ds, scores, K, config, tseed)
            out["mse"][m] = mse(tau_hat, ds.tau_true)
            out["runtime"][m] = score_time + time.perf_counter() - t1
            if boot_B:
                res = bootstrap_ci(ds, config, boot_B, boot_level, tseed,
                                   fit_fn=method_fit_fn(m), point=False)
                out["coverage"][m] = coverage(res, ds.tau_true)
    except Exception as exc:  # recorded per trial, not fatal
        logger.warning("trial %d failed: %s", t, exc)
        out["error"] = f"{type(exc).__name__}: {exc}"
    return out


def run_benchmark(spec: ScenarioSpec, methods: Sequence[str] = ("pp",), trials: int = 100,
                  config: PipelineConfig = PipelineConfig(), seed: int = 0,
                  bootstrap_B: Optional[int] = None, bootstrap_level: float = 0.95,
                  fix_coefficients: bool = False, workers: int = 1) -> BenchmarkReport:
    """Monte Carlo comparison of methods on fresh draws of a scenario."""
    if trials < 1:
        raise ValueError("trials must be >= 1")
    methods = list(methods)
    bad = [m for m in methods if m not in METHODS]
    if bad:
        raise ValueError(f"unknown methods {bad}")
    job = partial(_run_trial, spec=spec, methods=methods, config=config, master=seed,
                  boot_B=bootstrap_B, boot_level=bootstrap_level,
                  fix_coefficients=fix_coefficients)
    results = ordered_map(job, range(trials), workers)
    rep = BenchmarkReport(
        scenario=asdict(spec), methods=methods, trials=trials, seed=seed,
        config=config.to_dict(),
        bootstrap={"B": bootstrap_B, "level": bootstrap_level} if bootstrap_B else None,
    )
    for m in methods:
        rep.mse[m] = [r["mse"].get(m) for r in results]
        rep.runtime[m] = [r["runtime"].get(m) for r in results]
        if bootstrap_B:
            rep.coverage[m] = [r["coverage"].get(m) for r in results]
    rep.trial_seeds = [r["seed"] for r in results]
    rep.active_mass = [r["active_mass"] for r in results]
    rep.failures = [{"trial": t, "error": r["error"]} for t, r in enumerate(results) if r["error"]]
    return rep


# ------------------------------------------------------------------ K sweep


def _sweep_trial(t, spec, k_values, config, master):
    tseed = derive_seed(master, f"trial-{t}")
    ds = generate(replace(spec, seed=tseed))
    model = fit_scores(ds, config.penalty, config.lasso_folds, tseed, config.prognostic_link)
    scores = model.score(ds.X)
    return [mse(pp_estimate(ds, scores, k, config, tseed)[0], ds.tau_true) for k in k_values]


def sweep_k(spec: ScenarioSpec, k_values: Sequence[int], trials: int = 10,
            config: PipelineConfig = PipelineConfig(), seed: int = 0, workers: int = 1):
    """Mean MSE of the estimator for each forced K, over common datasets.

    Returns a list of ``(K, mean MSE)``.
    """
    k_values = [int(k) for k in k_values]
    if not k_values or min(k_values) < 1:
        raise ValueError("k_values must be non-empty and positive")
    job = partial(_sweep_trial, spec=spec, k_values=k_values, config=config, master=seed)
    rows = np.array(ordered_map(job, range(trials), workers))
    return list(zip(k_values, rows.mean(axis=0).tolist()))


# ------------------------------------------------------- high-dimensional


S7_ACTIVE = np.arange(6)


def truncated_scores(ds: Dataset, m: int) -> ScoreModel:
    """Unpenalised scores using only the first ``m`` covariates.

    The propensity fit is plain logistic regression (with the usual
    separation fallback). The prognostic fit is minimum-norm least squares
    on the control arm, which stays defined when the control arm has fewer
    units than ``m``.
    """
    m = min(m, ds.d)
    Xm = ds.X[:, :m]
    b_e, a, meta_e = fit_logistic(Xm, ds.Z)
    ctrl = ds.Z == 0
    A = np.column_stack([np.ones(int(ctrl.sum())), Xm[ctrl]])
    sol, *_ = np.linalg.lstsq(A, ds.Y[ctrl], rcond=None)
    alpha = np.zeros(ds.d)
    theta = np.zeros(ds.d)
    alpha[:m] = a
    theta[:m] = sol[1:]
    meta = {"propensity": {"separation": meta_e["separation"]},
            "prognostic": {"method": "min-norm lstsq"}, "columns": m}
    return ScoreModel(alpha, theta, b_e, float(sol[0]), {"mode": "none"}, "identity", meta)


def _highdim_trial(t, spec, config, master):
    tseed = derive_seed(master, f"trial-{t}")
    ds = generate(replace(spec, seed=tseed))
    K = config.resolve_k(ds.n)
    t0 = time.perf_counter()
    lasso = fit_scores(ds, "lasso", config.lasso_folds, tseed, config.prognostic_link)
    tau_l, _ = pp_estimate(ds, lasso.score(ds.X), K, config, tseed)
    t1 = time.perf_counter()
    base = truncated_scores(ds, min(ds.n // 2, ds.d))
    tau_b, _ = pp_estimate(ds, base.score(ds.X), K, config, tseed)
    support = set(np.flatnonzero(lasso.alpha)) | set(np.flatnonzero(lasso.theta))
    return {
        "seed": tseed,
        "mse_lasso": mse(tau_l, ds.tau_true),
        "mse_baseline": mse(tau_b, ds.tau_true),
        "support_e": int(np.count_nonzero(lasso.alpha)),
        "support_p": int(np.count_nonzero(lasso.theta)),
        "recovered": len(support & set(S7_ACTIVE.tolist())),
        "recovered_e": int(np.count_nonzero(lasso.alpha[S7_ACTIVE])),
        "recovered_p": int(np.count_nonzero(lasso.theta[S7_ACTIVE])),
        "lasso_seconds": t1 - t0,
    }


def highdim_comparison(spec: ScenarioSpec, trials: int = 5,
                       config: PipelineConfig = PipelineConfig(), seed: int = 0,
                       workers: int = 1) -> list:
    """Lasso-score estimator against unpenalised scores on the leading columns.

    Per trial: both MSEs, the selected support sizes and how many of the
    six true active covariates the lasso kept (union of both score models).
    """
    if spec.id != 7:
        raise ValueError("the high-dimensional comparison uses scenario 7")
    job = partial(_highdim_trial, spec=spec, config=config, master=seed)
    return ordered_map(job, range(trials), workers)
