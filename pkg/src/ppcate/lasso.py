"""L1-penalised least squares and logistic regression by coordinate descent.

Both problems are solved on a standardised design (columns centred, unit
population variance) with an unpenalised intercept:

    gaussian:  (1/2n) * sum (y - b - X beta)^2        + lam * |beta|_1
    logistic:  (1/n)  * sum -loglik(y | b + X beta)   + lam * |beta|_1

The logistic problem uses proximal Newton steps (a weighted least-squares
approximation solved by the same coordinate-descent kernel) with
backtracking on the penalised objective, so the objective never increases
between outer iterations.
"""
from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np

WEIGHT_FLOOR = 1e-5
DEVIANCE_RATIO_STOP = 0.999


@numba.njit(cache=True)
def _soft(x, t):
    if x > t:
        return x - t
    if x < -t:
        return x + t
    return 0.0


@numba.njit(cache=True)
def _sweep(X, w, r, beta, xwx, lam, idx, n):
    """One cyclic pass over the coordinates in ``idx``; returns max |step|."""
    max_change = 0.0
    for jj in range(idx.shape[0]):
        j = idx[jj]
        if xwx[j] <= 0.0:
            continue
        g = 0.0
        for i in range(n):
            g += w[i] * X[i, j] * r[i]
        g /= n
        old = beta[j]
        new = _soft(g + xwx[j] * old, lam) / xwx[j]
        delta = new - old
        if delta != 0.0:
            beta[j] = new
            for i in range(n):
                r[i] -= delta * X[i, j]
            ch = abs(delta) * np.sqrt(xwx[j])
            if ch > max_change:
                max_change = ch
    return max_change


@numba.njit(cache=True)
def _intercept_step(w, r, sw):
    delta = 0.0
    for i in range(r.shape[0]):
        delta += w[i] * r[i]
    delta /= sw
    for i in range(r.shape[0]):
        r[i] -= delta
    return delta


@numba.njit(cache=True)
def weighted_cd(X, z, w, beta, b, lam, tol, max_sweeps, cols):
    """Minimise (1/2n) sum w (z - b - X beta)^2 + lam |beta|_1 over ``cols``.

    Coordinates outside ``cols`` stay fixed. Full sweeps over ``cols``
    establish the active set, inner sweeps run over it until converged,
    then a full sweep confirms. Updates ``beta`` in place and returns the
    intercept and the number of sweeps.
    """
    n, p = X.shape
    xwx = np.zeros(p)
    for jj in range(cols.shape[0]):
        j = cols[jj]
        s = 0.0
        for i in range(n):
            s += w[i] * X[i, j] * X[i, j]
        xwx[j] = s / n
    sw = 0.0
    for i in range(n):
        sw += w[i]
    r = np.empty(n)
    for i in range(n):
        r[i] = z[i] - b
    for j in range(p):
        if beta[j] != 0.0:
            for i in range(n):
                r[i] -= X[i, j] * beta[j]
    sweeps = 0
    while sweeps < max_sweeps:
        db = _intercept_step(w, r, sw)
        b += db
        ch = _sweep(X, w, r, beta, xwx, lam, cols, n)
        sweeps += 1
        if ch < tol and abs(db) < tol:
            break
        active = np.empty(0, dtype=np.int64)
        cnt = 0
        for jj in range(cols.shape[0]):
            if beta[cols[jj]] != 0.0:
                cnt += 1
        active = np.empty(cnt, dtype=np.int64)
        cnt = 0
        for jj in range(cols.shape[0]):
            if beta[cols[jj]] != 0.0:
                active[cnt] = cols[jj]
                cnt += 1
        while sweeps < max_sweeps:
            db = _intercept_step(w, r, sw)
            b += db
            ch = _sweep(X, w, r, beta, xwx, lam, active, n)
            sweeps += 1
            if ch < tol and abs(db) < tol:
                break
    return b, sweeps


POLISH_START_TOL = 1e-4
POLISH_MAX_ACTIVE = 250
KKT_SLACK = 1e-10


def _residual(X, z, w, beta, b):
    nz = np.flatnonzero(beta)
    return z - b - X[:, nz] @ beta[nz]


def _polish(X, z, w, beta, b, lam):
    """Exact solution for the current active set and signs, if it verifies.

    Solves the stationarity equations restricted to the active set; the
    result is accepted only when no active coefficient changes sign and
    every inactive coordinate satisfies |gradient| <= lam. Returns the new
    intercept, or None (``beta`` untouched) when the check fails.
    """
    n = X.shape[0]
    active = np.flatnonzero(beta)
    if active.size + 1 >= n // 2 or active.size > POLISH_MAX_ACTIVE:
        return None
    A = np.column_stack([np.ones(n), X[:, active]])
    Aw = A * w[:, None]
    G = A.T @ Aw
    rhs = Aw.T @ z
    rhs[1:] -= n * lam * np.sign(beta[active])
    try:
        sol = np.linalg.solve(G, rhs)
    except np.linalg.LinAlgError:
        return None
    if not np.all(np.isfinite(sol)):
        return None
    if np.any(np.sign(sol[1:]) != np.sign(beta[active])):
        return None
    r = z - A @ sol
    grad = X.T @ (w * r) / n
    inactive = np.ones(beta.size, dtype=bool)
    inactive[active] = False
    if np.any(np.abs(grad[inactive]) > lam * (1 + KKT_SLACK) + 1e-14):
        return None
    beta[active] = sol[1:]
    return float(sol[0])


def solve_weighted(X, z, w, beta, b, lam, tol, strong=None, max_sweeps=100_000):
    """Weighted lasso subproblem with screening.

    Coordinate descent runs on the screened set (``strong`` plus the
    current nonzeros); an exact active-set polish is tried once CD is
    loosely converged. Any coordinate outside the set that violates the
    optimality conditions is added and the solve repeated.
    """
    p = X.shape[1]
    mask = np.ones(p, dtype=bool) if strong is None else strong.copy()
    mask |= beta != 0
    sweeps = 0
    while True:
        cols = np.flatnonzero(mask).astype(np.int64)
        b, s1 = weighted_cd(X, z, w, beta, b, lam, max(tol, POLISH_START_TOL), max_sweeps, cols)
        sweeps += s1
        if tol < POLISH_START_TOL:
            polished = _polish(X, z, w, beta, b, lam)
            if polished is not None:
                b = polished
            b, s2 = weighted_cd(X, z, w, beta, b, lam, tol, max_sweeps, cols)
            sweeps += s2
        if mask.all():
            return b, sweeps
        rest = np.flatnonzero(~mask)
        r = _residual(X, z, w, beta, b)
        g = X[:, rest].T @ (w * r) / X.shape[0]
        bad = rest[np.abs(g) > lam * (1 + KKT_SLACK)]
        if bad.size == 0:
            return b, sweeps
        mask[bad] = True


def strong_set(grad_prev, lam, lam_prev):
    """Sequential strong rule: keep j with |grad_j| >= 2 lam - lam_prev."""
    return np.abs(grad_prev) >= 2.0 * lam - lam_prev


def _sigmoid(t):
    return 0.5 * (1.0 + np.tanh(0.5 * t))


def logistic_nll_mean(eta: np.ndarray, y: np.ndarray) -> float:
    # log(1 + exp(eta)) - y * eta, stable form
    return float(np.mean(np.logaddexp(0.0, eta) - y * eta))


@dataclass
class PathResult:
    lambdas: np.ndarray
    coef: np.ndarray  # (n_lambda, p) on the standardised scale
    intercept: np.ndarray  # (n_lambda,)
    iterations: np.ndarray
    converged: np.ndarray
    truncated_at: int | None = None


def gaussian_path(Xs, y, lambdas, tol=1e-7, max_sweeps=100_000) -> PathResult:
    """Warm-started path; stops early once R^2 exceeds ``DEVIANCE_RATIO_STOP``.

    Grid points after an early stop repeat the last solution.
    """
    Xs = np.asfortranarray(Xs, dtype=float)
    y = np.asarray(y, dtype=float)
    n, p = Xs.shape
    w = np.ones(n)
    beta = np.zeros(p)
    b = float(np.mean(y))
    tss = float(np.sum((y - b) ** 2))
    L = len(lambdas)
    coef = np.zeros((L, p))
    icpt = np.zeros(L)
    iters = np.zeros(L, dtype=int)
    conv = np.zeros(L, dtype=bool)
    truncated = None
    lam_prev = float(lambdas[0]) if L else 0.0
    for k, lam in enumerate(lambdas):
        if truncated is not None:
            coef[k], icpt[k], conv[k] = beta, b, conv[k - 1]
            continue
        grad = Xs.T @ _residual(Xs, y, w, beta, b) / n
        strong = strong_set(grad, lam, lam_prev)
        b, sweeps = solve_weighted(Xs, y, w, beta, b, float(lam), tol, strong, max_sweeps)
        lam_prev = lam
        coef[k] = beta
        icpt[k] = b
        iters[k] = sweeps
        conv[k] = sweeps < max_sweeps
        if tss > 0:
            rss = float(np.sum((y - b - Xs @ beta) ** 2))
            if 1.0 - rss / tss > DEVIANCE_RATIO_STOP:
                truncated = k
    return PathResult(np.asarray(lambdas, float), coef, icpt, iters, conv, truncated)


def logistic_penalised_objective(Xs, y, beta, b, lam) -> float:
    return logistic_nll_mean(b + Xs @ beta, y) + lam * float(np.sum(np.abs(beta)))


def logistic_path(
    Xs, y, lambdas, tol=1e-7, max_outer=100, max_sweeps=100_000
) -> PathResult:
    """Proximal-Newton lasso-logistic path with warm starts."""
    Xs = np.asfortranarray(Xs, dtype=float)
    y = np.asarray(y, dtype=float)
    n, p = Xs.shape
    ybar = float(np.mean(y))
    beta = np.zeros(p)
    b = float(np.log(ybar / (1.0 - ybar)))
    null_dev = logistic_nll_mean(np.full(n, b), y)
    L = len(lambdas)
    coef = np.zeros((L, p))
    icpt = np.zeros(L)
    iters = np.zeros(L, dtype=int)
    conv = np.zeros(L, dtype=bool)
    truncated = None
    lam_prev = float(lambdas[0]) if L else 0.0
    for k, lam in enumerate(lambdas):
        lam = float(lam)
        total_sweeps = 0
        if truncated is not None:
            coef[k], icpt[k], conv[k] = beta, b, conv[k - 1]
            continue
        grad = Xs.T @ (y - _sigmoid(b + Xs @ beta)) / n
        strong = strong_set(grad, lam, lam_prev)
        lam_prev = lam
        obj = logistic_penalised_objective(Xs, y, beta, b, lam)
        converged = False
        it = 0
        inner_tol = 1e-3
        for it in range(1, max_outer + 1):
            eta = b + Xs @ beta
            mu = _sigmoid(eta)
            w = np.maximum(mu * (1.0 - mu), WEIGHT_FLOOR)
            z = eta + (y - mu) / w
            nb = beta.copy()
            nb0, sweeps = solve_weighted(Xs, z, w, nb, b, lam, inner_tol, strong, max_sweeps)
            total_sweeps += sweeps
            step_b, step = nb0 - b, nb - beta
            t = 1.0
            while True:
                cand_beta = beta + t * step
                cand_b = b + t * step_b
                cand = logistic_penalised_objective(Xs, y, cand_beta, cand_b, lam)
                if cand <= obj + 1e-15 * max(1.0, abs(obj)) or t < 1e-10:
                    break
                t *= 0.5
            change = t * max(np.max(np.abs(step), initial=0.0), abs(step_b))
            if cand <= obj + 1e-15 * max(1.0, abs(obj)):
                beta, b, obj = cand_beta, cand_b, cand
            if change < tol and inner_tol <= tol * 0.1:
                converged = True
                break
            # inner accuracy tracks the outer progress
            inner_tol = max(tol * 0.1, min(inner_tol, 0.01 * change))
        coef[k], icpt[k], iters[k], conv[k] = beta, b, total_sweeps, converged
        dev = logistic_nll_mean(b + Xs @ beta, y)
        if null_dev > 0 and 1.0 - dev / null_dev > DEVIANCE_RATIO_STOP:
            truncated = k
    return PathResult(np.asarray(lambdas, float), coef, icpt, iters, conv, truncated)


def lambda_max_gaussian(Xs, y) -> float:
    return float(np.max(np.abs(Xs.T @ (y - y.mean()))) / Xs.shape[0])


def lambda_max_logistic(Xs, y) -> float:
    return float(np.max(np.abs(Xs.T @ (y - y.mean()))) / Xs.shape[0])


def default_ratio(n: int, p: int) -> float:
    """Smallest lambda as a fraction of lambda_max (1e-2 when n < p)."""
    return 1e-3 if n >= p else 1e-2


def default_grid(lam_max: float, n_lambda: int = 100, ratio: float = 1e-3) -> np.ndarray:
    if lam_max <= 0:
        lam_max = 1e-8
    return np.geomspace(lam_max, lam_max * ratio, n_lambda)


def kkt_violation(grad: np.ndarray, beta: np.ndarray, lam: float) -> float:
    """Largest violation of the lasso optimality conditions.

    ``grad`` is the gradient of the smooth part. Active coordinates need
    grad_j + lam * sign(beta_j) = 0; inactive ones need |grad_j| <= lam.
    """
    active = beta != 0
    v_active = np.abs(grad[active] + lam * np.sign(beta[active]))
    v_inactive = np.maximum(np.abs(grad[~active]) - lam, 0.0)
    return float(max(np.max(v_active, initial=0.0), np.max(v_inactive, initial=0.0)))
