"""Propensity and prognostic score models.

Propensity: logistic regression of Z on X over all units. Prognostic:
least squares of Y on X over the control arm. Both carry an unpenalised
intercept. In lasso mode the slopes get an L1 penalty chosen by K-fold
cross-validation.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import lasso as _lasso
from .data import Dataset, ScoredSample, clamp_propensity
from .seeding import make_rng

logger = logging.getLogger(__name__)

GRAD_TOL = 1e-8
MAX_NEWTON = 100
SEPARATION_ETA = 30.0
SEPARATION_FRACTION = 0.10
SEPARATION_RIDGE = 1e-6
SCHEMA_VERSION = 1


class RankDeficientError(ValueError):
    """Unpenalised fit is not identifiable; use lasso mode instead."""


class ConvergenceError(RuntimeError):
    """A score fit did not converge and no fallback applied."""


def sigmoid(t):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(t, dtype=float)))


# ------------------------------------------------------------------ logistic


def logistic_objective(coef, A, z, ridge=0.0) -> float:
    """Negative Bernoulli log-likelihood (summed) for design ``A``."""
    eta = A @ coef
    val = float(np.sum(np.logaddexp(0.0, eta) - z * eta))
    if ridge:
        val += 0.5 * ridge * float(coef[1:] @ coef[1:])
    return val


def logistic_gradient(coef, A, z, ridge=0.0) -> np.ndarray:
    g = A.T @ (sigmoid(A @ coef) - z)
    if ridge:
        g[1:] += ridge * coef[1:]
    return g


def _newton(A, z, ridge=0.0, max_iter=MAX_NEWTON, tol=GRAD_TOL):
    coef = np.zeros(A.shape[1])
    zbar = np.clip(z.mean(), 1e-12, 1 - 1e-12)
    coef[0] = np.log(zbar / (1 - zbar))
    obj = logistic_objective(coef, A, z, ridge)
    history = [obj]
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        g = logistic_gradient(coef, A, z, ridge)
        if np.max(np.abs(g)) < tol:
            converged = True
            it -= 1
            break
        mu = sigmoid(A @ coef)
        H = (A * (mu * (1 - mu))[:, None]).T @ A
        if ridge:
            H[1:, 1:] += ridge * np.eye(A.shape[1] - 1)
        try:
            step = np.linalg.solve(H, -g)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(H, -g, rcond=None)[0]
        t = 1.0
        while t > 1e-12:
            cand = coef + t * step
            cobj = logistic_objective(cand, A, z, ridge)
            if cobj <= obj:
                break
            t *= 0.5
        else:
            # no descent along the Newton direction: at numerical optimum
            converged = np.max(np.abs(g)) < tol
            break
        coef, obj = cand, cobj
        history.append(obj)
    else:
        converged = np.max(np.abs(logistic_gradient(coef, A, z, ridge))) < tol
    return coef, {"iterations": it, "converged": bool(converged), "objective": history}


def _design(X):
    return np.column_stack([np.ones(X.shape[0]), X])


def _constant_columns(X) -> np.ndarray:
    return np.ptp(X, axis=0) == 0 if X.shape[0] else np.ones(X.shape[1], bool)


def _check_rank(A, what):
    rank = np.linalg.matrix_rank(A)
    if rank < A.shape[1]:
        raise RankDeficientError(
            f"{what} design has rank {rank} < {A.shape[1]} (intercept included); "
            "drop the singular covariate or use penalty='lasso'"
        )


def fit_logistic(X, z):
    """Unpenalised logistic fit with intercept.

    Returns ``(intercept, coef, meta)``. Constant columns are absorbed by
    the intercept and get coefficient 0. If the linear predictor diverges
    (|eta| > 30 on at least 10% of units) the fit is redone with a tiny
    ridge penalty and flagged as separated; the same refit is used when
    plain Newton fails to converge.
    """
    X = np.asarray(X, float)
    z = np.asarray(z, float)
    d = X.shape[1]
    const = _constant_columns(X)
    keep = np.flatnonzero(~const)
    A = _design(X[:, keep])
    _check_rank(A, "propensity")
    full, meta = _newton(A, z)
    separated = np.mean(np.abs(A @ full) > SEPARATION_ETA) >= SEPARATION_FRACTION
    meta["separation"] = bool(separated)
    if separated or not meta["converged"]:
        why = "quasi-separation" if separated else "non-convergence"
        logger.warning("%s in logistic fit; using ridge-stabilised Newton", why)
        full, meta = _newton(A, z, ridge=SEPARATION_RIDGE)
        meta["separation"] = bool(separated)
        meta["ridge"] = SEPARATION_RIDGE
    coef = np.zeros(d)
    coef[keep] = full[1:]
    meta["dropped_constant"] = np.flatnonzero(const).tolist()
    meta["gradient_max"] = float(np.max(np.abs(logistic_gradient(full, A, z, meta.get("ridge", 0.0)))))
    return float(full[0]), coef, meta


def fit_least_squares(X, y):
    X = np.asarray(X, float)
    y = np.asarray(y, float)
    n, d = X.shape
    if n <= d:
        raise RankDeficientError(
            f"prognostic fit needs more control units than covariates (n_control={n}, d={d}); "
            "use penalty='lasso'"
        )
    const = _constant_columns(X)
    keep = np.flatnonzero(~const)
    A = _design(X[:, keep])
    _check_rank(A, "prognostic")
    sol, *_ = np.linalg.lstsq(A, y, rcond=None)
    coef = np.zeros(d)
    coef[keep] = sol[1:]
    resid = y - A @ sol
    meta = {
        "dropped_constant": np.flatnonzero(const).tolist(),
        "orthogonality": float(np.max(np.abs(A.T @ resid))),
        "converged": True,
    }
    return float(sol[0]), coef, meta


def fit_propensity(ds: Dataset):
    """Unpenalised propensity fit: ``(intercept, alpha, meta)``."""
    return fit_logistic(ds.X, ds.Z)


def fit_prognostic(ds: Dataset, link: str = "identity"):
    """Unpenalised prognostic fit on the control arm: ``(intercept, theta, meta)``."""
    ctrl = ds.Z == 0
    if link == "logit":
        if ctrl.sum() <= ds.d:
            raise RankDeficientError("too few control units for a logistic prognostic fit")
        return fit_logistic(ds.X[ctrl], ds.Y[ctrl])
    return fit_least_squares(ds.X[ctrl], ds.Y[ctrl])


# --------------------------------------------------------------------- lasso


class _Standardizer:
    def __init__(self, X):
        self.mean = X.mean(axis=0)
        sd = X.std(axis=0)
        self.keep = sd > 0
        self.scale = np.where(self.keep, sd, 1.0)

    def transform(self, X):
        Xs = (X - self.mean) / self.scale
        Xs[:, ~self.keep] = 0.0
        return Xs

    def to_original(self, b, beta):
        coef = np.where(self.keep, beta / self.scale, 0.0)
        return float(b - coef @ self.mean), coef


def _fold_ids(n, folds, rng, strata=None):
    ids = np.empty(n, dtype=int)
    if strata is None:
        ids[rng.permutation(n)] = np.arange(n) % folds
        return ids
    offset = 0
    for level in np.unique(strata):
        members = np.flatnonzero(strata == level)
        perm = rng.permutation(members)
        ids[perm] = (np.arange(perm.size) + offset) % folds
        offset += perm.size
    return ids


def _path(kind, X, y, lambdas, tol):
    st = _Standardizer(X)
    Xs = st.transform(X)
    if kind == "logistic":
        res = _lasso.logistic_path(Xs, y, lambdas, tol=tol)
    else:
        res = _lasso.gaussian_path(Xs, y, lambdas, tol=tol)
    return st, res


def _cv_loss(kind, y, eta):
    if kind == "logistic":
        return 2.0 * (np.logaddexp(0.0, eta) - y * eta)  # deviance per unit
    return (y - eta) ** 2


@dataclass
class LassoFit:
    intercept: float
    coef: np.ndarray
    lambda_selected: float
    lambdas: np.ndarray
    cv_error: np.ndarray
    cv_se: np.ndarray
    path_coef: np.ndarray  # original scale, (n_lambda, d)
    path_intercept: np.ndarray
    std_coef: np.ndarray  # standardised-scale path
    std_intercept: np.ndarray
    standardizer: _Standardizer
    converged: bool
    iterations: int
    truncated_at: Optional[int] = None

    def meta(self) -> dict:
        return {
            "lambda_selected": self.lambda_selected,
            "lambdas": self.lambdas.tolist(),
            "cv_error": self.cv_error.tolist(),
            "cv_se": self.cv_se.tolist(),
            "path_nonzero": np.count_nonzero(self.std_coef, axis=1).tolist(),
            "converged": self.converged,
            "iterations": self.iterations,
            "truncated_at": self.truncated_at,
        }


def lasso_cv(
    kind: str,
    X,
    y,
    lambda_grid: Optional[Sequence[float]] = None,
    folds: int = 10,
    seed: int = 0,
    stratify: bool = False,
    tol: float = 1e-7,
) -> LassoFit:
    """Fit a lasso path on all rows and pick lambda by K-fold CV.

    The grid, if given, must be non-negative and sorted descending. The
    selected lambda minimises the mean held-out loss (deviance for
    ``kind='logistic'``, squared error for ``'gaussian'``); ties go to the
    larger lambda.
    """
    X = np.asarray(X, float)
    y = np.asarray(y, float)
    n = X.shape[0]
    if folds < 2:
        raise ValueError("folds must be >= 2")
    if folds > n:
        raise ValueError(f"folds ({folds}) exceeds number of rows ({n})")
    st = _Standardizer(X)
    Xs = st.transform(X)
    if lambda_grid is None:
        lmax = (_lasso.lambda_max_logistic if kind == "logistic" else _lasso.lambda_max_gaussian)(Xs, y)
        lambdas = _lasso.default_grid(lmax, ratio=_lasso.default_ratio(*X.shape))
    else:
        lambdas = np.asarray(lambda_grid, float)
        if lambdas.size == 0:
            raise ValueError("lambda_grid is empty")
        if np.any(lambdas < 0) or np.any(np.diff(lambdas) >= 0):
            raise ValueError("lambda_grid must be non-negative and strictly descending")
    solver = _lasso.logistic_path if kind == "logistic" else _lasso.gaussian_path
    full = solver(Xs, y, lambdas, tol=tol)

    rng = make_rng(seed, "cv-fold")
    strata = y if (stratify and kind == "logistic") else None
    for attempt in range(2):
        ids = _fold_ids(n, folds, rng, strata)
        ok = True
        if kind == "logistic":
            for k in range(folds):
                train = y[ids != k]
                if train.min() == train.max():
                    ok = False
        if ok:
            break
        if attempt == 1:
            raise ValueError("cross-validation fold has a single-class training set")
    losses = np.zeros((folds, lambdas.size))
    sizes = np.zeros(folds)
    pooled = np.zeros((n, lambdas.size))
    for k in range(folds):
        test = ids == k
        fst, fres = _path(kind, X[~test], y[~test], lambdas, tol)
        Xt = fst.transform(X[test])
        eta = fres.intercept[None, :] + Xt @ fres.coef.T
        loss = _cv_loss(kind, y[test][:, None], eta)
        pooled[test] = loss
        losses[k] = loss.mean(axis=0)
        sizes[k] = test.sum()
    cv_error = pooled.mean(axis=0)
    cv_se = np.sqrt(np.average((losses - cv_error) ** 2, axis=0, weights=sizes) / (folds - 1))
    best = int(np.flatnonzero(cv_error == cv_error.min())[0])
    path_orig = [st.to_original(full.intercept[k], full.coef[k]) for k in range(lambdas.size)]
    b, coef = path_orig[best]
    return LassoFit(
        intercept=b,
        coef=coef,
        lambda_selected=float(lambdas[best]),
        lambdas=lambdas,
        cv_error=cv_error,
        cv_se=cv_se,
        path_coef=np.array([c for _, c in path_orig]),
        path_intercept=np.array([i for i, _ in path_orig]),
        std_coef=full.coef,
        std_intercept=full.intercept,
        standardizer=st,
        converged=bool(full.converged[: (full.truncated_at or lambdas.size - 1) + 1].all()),
        iterations=int(full.iterations.sum()),
        truncated_at=full.truncated_at,
    )


def fit_propensity_lasso(ds: Dataset, lambda_grid=None, folds: int = 10, seed: int = 0) -> LassoFit:
    """Lasso-logistic propensity fit with folds stratified on Z."""
    return lasso_cv("logistic", ds.X, ds.Z, lambda_grid, folds, seed, stratify=True)


def fit_prognostic_lasso(
    ds: Dataset, lambda_grid=None, folds: int = 10, seed: int = 0, link: str = "identity"
) -> LassoFit:
    """Lasso prognostic fit on the control arm, CV by mean squared error."""
    ctrl = ds.Z == 0
    kind = "logistic" if link == "logit" else "gaussian"
    return lasso_cv(kind, ds.X[ctrl], ds.Y[ctrl], lambda_grid, folds, seed, stratify=False)


# -------------------------------------------------------------- score model


@dataclass(frozen=True)
class ScoreModel:
    """Fitted propensity (``alpha``) and prognostic (``theta``) coefficients."""

    alpha: np.ndarray
    theta: np.ndarray
    intercept_e: float
    intercept_p: float
    penalty: dict = field(default_factory=lambda: {"mode": "none"})
    prognostic_link: str = "identity"
    fit_meta: dict = field(default_factory=dict)

    @property
    def d(self) -> int:
        return self.alpha.shape[0]

    def score(self, X_new) -> ScoredSample:
        X_new = np.asarray(X_new, float)
        if X_new.ndim == 1:
            X_new = X_new[None, :]
        if X_new.shape[1] != self.d:
            raise ValueError(f"expected {self.d} covariate columns, got {X_new.shape[1]}")
        e = clamp_propensity(sigmoid(X_new @ self.alpha + self.intercept_e))
        p = X_new @ self.theta + self.intercept_p
        if self.prognostic_link == "logit":
            p = sigmoid(p)
        return ScoredSample(e, p)

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "alpha": [float(v) for v in self.alpha],
            "theta": [float(v) for v in self.theta],
            "intercept_e": float(self.intercept_e),
            "intercept_p": float(self.intercept_p),
            "penalty": self.penalty,
            "prognostic_link": self.prognostic_link,
            "fit_meta": _jsonable(self.fit_meta),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, obj: dict) -> "ScoreModel":
        return cls(
            alpha=np.asarray(obj["alpha"], float),
            theta=np.asarray(obj["theta"], float),
            intercept_e=float(obj["intercept_e"]),
            intercept_p=float(obj["intercept_p"]),
            penalty=obj.get("penalty", {"mode": "none"}),
            prognostic_link=obj.get("prognostic_link", "identity"),
            fit_meta=obj.get("fit_meta", {}),
        )

    @classmethod
    def from_json(cls, text: str) -> "ScoreModel":
        return cls.from_dict(json.loads(text))


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def resolve_penalty(ds: Dataset, penalty: str) -> str:
    if penalty == "auto":
        return "lasso" if ds.d >= ds.n_control else "none"
    if penalty not in ("none", "lasso"):
        raise ValueError(f"unknown penalty mode {penalty!r}")
    return penalty


def fit_scores(
    ds: Dataset,
    penalty: str = "auto",
    folds: int = 10,
    seed: int = 0,
    prognostic_link: str = "identity",
    lambda_grid_e=None,
    lambda_grid_p=None,
) -> ScoreModel:
    """Fit both score models. ``penalty='auto'`` picks lasso when d >= n_control."""
    mode = resolve_penalty(ds, penalty)
    if mode == "none":
        b_e, alpha, meta_e = fit_propensity(ds)
        b_p, theta, meta_p = fit_prognostic(ds, prognostic_link)
        pen = {"mode": "none"}
        meta = {"propensity": _slim(meta_e), "prognostic": _slim(meta_p)}
    else:
        fe = fit_propensity_lasso(ds, lambda_grid_e, folds, seed)
        fp = fit_prognostic_lasso(ds, lambda_grid_p, folds, seed, prognostic_link)
        b_e, alpha, b_p, theta = fe.intercept, fe.coef, fp.intercept, fp.coef
        pen = {"mode": "lasso", "lambda1": fe.lambda_selected, "lambda2": fp.lambda_selected}
        meta = {"propensity": fe.meta(), "prognostic": fp.meta(), "folds": folds}
    return ScoreModel(alpha, theta, b_e, b_p, pen, prognostic_link, meta)


def _slim(meta):
    out = dict(meta)
    hist = out.pop("objective", None)
    if hist is not None:
        out["final_objective"] = hist[-1]
    return out


def require_converged(model: "ScoreModel") -> "ScoreModel":
    """Raise ConvergenceError if either score fit reports non-convergence."""
    bad = [k for k in ("propensity", "prognostic")
           if not model.fit_meta.get(k, {}).get("converged", True)]
    if bad:
        raise ConvergenceError(f"{' and '.join(bad)} fit did not converge")
    return model
