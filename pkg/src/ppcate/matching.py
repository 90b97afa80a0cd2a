"""Nearest-neighbour matching across treatment arms in score space.

Each unit is matched to the K closest units of the opposite arm (with
replacement). Distance is plain Euclidean on the score coordinates; ties
are broken by lower unit index, so results are deterministic.
"""
from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .data import Dataset, ScoredSample

BRUTE_FORCE_BELOW = 64


@dataclass(frozen=True)
class MatchResult:
    neighbors: np.ndarray  # (n, K) unit indices, nearest first
    distances: np.ndarray  # (n, K)
    K: int
    clamped: bool = False

    @property
    def neighbor_sets(self) -> list:
        return [row.tolist() for row in self.neighbors]


@dataclass(frozen=True)
class ProxyEffects:
    y_tilde: np.ndarray

    def __len__(self):
        return self.y_tilde.shape[0]


def score_distance(a, b) -> float:
    """Euclidean distance between two (propensity, prognostic) pairs."""
    de = float(a[0]) - float(b[0])
    dp = float(a[1]) - float(b[1])
    return math.sqrt(de * de + dp * dp)


def default_k(n: int) -> int:
    """Nearest integer to ln(n), at least 1."""
    if n < 2:
        raise ValueError("n must be >= 2")
    return max(1, int(math.floor(math.log(n) + 0.5)))


def _points(scores, standardize_prognostic=False) -> np.ndarray:
    if isinstance(scores, ScoredSample):
        pts = scores.as_matrix()
    else:
        pts = np.asarray(scores, float)
        if pts.ndim == 1:
            pts = pts[:, None]
    if standardize_prognostic and pts.shape[1] == 2:
        sd = pts[:, 1].std()
        if sd > 0:
            pts = np.column_stack([pts[:, 0], pts[:, 1] / sd])
    return pts


def _exact_dist(q, cand):
    diff = cand - q
    return np.sqrt(np.sum(diff * diff, axis=-1))


def _rank(q, pool_pts, pool_idx, K):
    dist = _exact_dist(q, pool_pts)
    order = np.lexsort((pool_idx, dist))[:K]
    return pool_idx[order], dist[order]


def _knn_arm(query_pts, pool_pts, pool_idx, K, brute):
    m = query_pts.shape[0]
    out_idx = np.empty((m, K), dtype=np.int64)
    out_d = np.empty((m, K))
    if brute:
        for i in range(m):
            out_idx[i], out_d[i] = _rank(query_pts[i], pool_pts, pool_idx, K)
        return out_idx, out_d
    tree = cKDTree(pool_pts)
    size = pool_pts.shape[0]
    k_query = min(size, K + 8)
    dists, locs = tree.query(query_pts, k=k_query)
    if k_query == 1:
        dists, locs = dists[:, None], locs[:, None]
    exact = _exact_dist(query_pts[:, None, :], pool_pts[locs])
    gidx = pool_idx[locs]
    order = np.lexsort((gidx, exact), axis=-1)[:, :K]
    out_idx[:] = np.take_along_axis(gidx, order, axis=1)
    out_d[:] = np.take_along_axis(exact, order, axis=1)
    # rows whose K-th distance might tie with an unreturned point get re-queried
    kth = out_d[:, -1]
    redo = np.flatnonzero(~(dists[:, -1] > kth * (1 + 1e-9) + 1e-300)) if k_query < size else []
    for i in redo:
        k = k_query
        while True:
            k = min(size, 2 * k)
            dd, loc = tree.query(query_pts[i], k=k)
            dd, loc = np.atleast_1d(dd), np.atleast_1d(loc)
            ex = _exact_dist(query_pts[i], pool_pts[loc])
            gi = pool_idx[loc]
            o = np.lexsort((gi, ex))[:K]
            if k >= size or dd[-1] > ex[o[-1]] * (1 + 1e-9) + 1e-300:
                out_idx[i], out_d[i] = gi[o], ex[o]
                break
    return out_idx, out_d


def knn_opposite(points, Z, K: int, brute: bool | None = None) -> MatchResult:
    """K nearest opposite-arm units for every unit, on arbitrary coordinates."""
    pts = _points(points)
    Z = np.asarray(Z)
    if K < 1:
        raise ValueError("K must be >= 1")
    treated = np.flatnonzero(Z == 1)
    control = np.flatnonzero(Z == 0)
    if treated.size == 0 or control.size == 0:
        raise ValueError("both arms must be non-empty")
    n = pts.shape[0]
    k_eff = min(K, treated.size, control.size)
    clamped = k_eff < K
    if clamped:
        warnings.warn(f"K={K} clamped to smallest arm size {k_eff}", stacklevel=2)
    if brute is None:
        brute = n < BRUTE_FORCE_BELOW
    neighbors = np.empty((n, k_eff), dtype=np.int64)
    dist = np.empty((n, k_eff))
    for own, other in ((treated, control), (control, treated)):
        idx, dd = _knn_arm(pts[own], pts[other], other, k_eff, brute)
        neighbors[own] = idx
        dist[own] = dd
    return MatchResult(neighbors, dist, k_eff, clamped)


def match_knn(ds: Dataset, scores: ScoredSample, K: int, standardize_prognostic: bool = False,
              brute: bool | None = None) -> MatchResult:
    """Match every unit to its K nearest opposite-arm units in (e_hat, p_hat).

    K is clamped to the smaller arm size (so every unit gets the same
    number of matches) and ``clamped`` is set on the result.
    """
    if len(scores) != ds.n:
        raise ValueError("scores and dataset differ in length")
    return knn_opposite(_points(scores, standardize_prognostic), ds.Z, K, brute)


def proxy_ite(ds: Dataset, match: MatchResult) -> ProxyEffects:
    """Signed difference between each outcome and its matches' mean outcome."""
    Y = ds.Y
    if match.neighbors.shape[0] != ds.n:
        raise ValueError("match result does not belong to this dataset")
    # mean of differences rather than difference of means: exact zeros when
    # outcomes coincide
    gap = (Y[:, None] - Y[match.neighbors]).mean(axis=1)
    return ProxyEffects((2.0 * ds.Z - 1.0) * gap)


def dump_matches(match: MatchResult, path) -> None:
    """Write (unit, rank, neighbor, distance) rows; rank is 1-based."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["unit", "rank", "neighbor", "distance"])
        for i, (row, drow) in enumerate(zip(match.neighbors, match.distances)):
            for r, (j, dist) in enumerate(zip(row, drow), start=1):
                w.writerow([i, r, int(j), repr(float(dist))])
