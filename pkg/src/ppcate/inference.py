"""Bootstrap percentile intervals, coverage and MSE."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from functools import partial
from typing import Callable, Optional

import numpy as np

from .data import Dataset
from .parallel import ordered_map
from .pipeline import PipelineConfig, fit_pipeline
from .seeding import derive_seed, make_rng

MAX_REDRAWS = 100

# fit_fn(resample, config, seed) -> predict(X) callable
FitFn = Callable[[Dataset, PipelineConfig, int], Callable[[np.ndarray], np.ndarray]]


class BootstrapError(RuntimeError):
    pass


def mse(tau_hat, tau_true) -> float:
    a = np.asarray(tau_hat, float).ravel()
    b = np.asarray(tau_true, float).ravel()
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.size} vs {b.size}")
    return float(np.mean((a - b) ** 2))


def order_statistic_index(q: float, B: int) -> int:
    """1-based order statistic for the type-1 (inverse ECDF) quantile.

    k = ceil(q * B), clamped to [1, B]. The product is rounded to 9
    decimals first so that e.g. 0.025 * 1000 gives 25, not 26.
    """
    k = math.ceil(round(q * B, 9))
    return min(max(k, 1), B)


def percentile_interval(estimates: np.ndarray, level: float):
    """Per-row type-1 quantiles at (1-level)/2 and 1-(1-level)/2."""
    B = estimates.shape[1]
    alpha = (1.0 - level) / 2.0
    srt = np.sort(estimates, axis=1)
    lo = srt[:, order_statistic_index(alpha, B) - 1]
    hi = srt[:, order_statistic_index(1.0 - alpha, B) - 1]
    return lo, hi


@dataclass(frozen=True)
class BootstrapResult:
    B: int
    level: float
    seed: int
    estimates: np.ndarray  # (n, B)
    lo: np.ndarray
    hi: np.ndarray
    point: Optional[np.ndarray] = None

    @property
    def width(self) -> np.ndarray:
        return self.hi - self.lo

    def at_level(self, level: float) -> "BootstrapResult":
        lo, hi = percentile_interval(self.estimates, level)
        return BootstrapResult(self.B, level, self.seed, self.estimates, lo, hi, self.point)

    def to_csv(self, path) -> None:
        point = self.point if self.point is not None else np.full(self.lo.size, np.nan)
        with open(path, "w") as fh:
            fh.write("index,estimate,lo,hi\n")
            for i, (p, lo, hi) in enumerate(zip(point, self.lo, self.hi)):
                fh.write(f"{i},{p!r},{lo!r},{hi!r}\n")

    def summary(self, tau_true=None) -> dict:
        out = {
            "schema_version": 1,
            "B": self.B,
            "level": self.level,
            "seed": self.seed,
            "n": int(self.lo.size),
            "mean_width": float(np.mean(self.width)),
        }
        if tau_true is not None:
            out["coverage"] = coverage(self, tau_true)
        return out

    def summary_json(self, tau_true=None) -> str:
        return json.dumps(self.summary(tau_true), indent=2)


def coverage(result: BootstrapResult, tau_true) -> float:
    """Fraction of units with lo <= tau_true <= hi."""
    tau = np.asarray(tau_true, float).ravel()
    if tau.size != result.lo.size:
        raise ValueError(f"length mismatch: {tau.size} vs {result.lo.size}")
    return float(np.mean((result.lo <= tau) & (tau <= result.hi)))


def pipeline_fit_fn(resample: Dataset, config: PipelineConfig, seed: int):
    fitted = fit_pipeline(resample, config, seed=seed, validate=False)
    return fitted.predict


def draw_resample(n: int, Z: np.ndarray, seed: int, b: int) -> np.ndarray:
    """Row indices for resample ``b``; redrawn while an arm is empty."""
    rng = make_rng(seed, f"bootstrap-{b}")
    for _ in range(MAX_REDRAWS):
        idx = rng.integers(0, n, size=n)
        z = Z[idx]
        if z.min() == 0 and z.max() == 1:
            return idx
    raise BootstrapError(f"resample {b}: an arm stayed empty after {MAX_REDRAWS} draws")


def _one_resample(b, ds, config, seed, fit_fn):
    idx = draw_resample(ds.n, ds.Z, seed, b)
    predict = fit_fn(ds.subset(idx), config, derive_seed(seed, f"bootstrap-{b}-fit"))
    return np.asarray(predict(ds.X), float)


def bootstrap_ci(
    ds: Dataset,
    config: PipelineConfig = PipelineConfig(),
    B: Optional[int] = None,
    level: Optional[float] = None,
    seed: Optional[int] = None,
    fit_fn: FitFn = pipeline_fit_fn,
    workers: int = 1,
    point: bool = True,
) -> BootstrapResult:
    """Non-parametric bootstrap of the whole pipeline.

    Each resample of n rows (with replacement) refits scores, matching and
    tree, then predicts for every original unit from its covariates. The
    interval is the per-unit type-1 percentile interval at ``level``.
    """
    B = config.B if B is None else B
    level = config.level if level is None else level
    seed = config.seed if seed is None else seed
    if B < 2:
        raise ValueError("B must be >= 2")
    if not (0 < level < 1):
        raise ValueError("level must lie in (0, 1)")
    job = partial(_one_resample, ds=ds, config=config, seed=seed, fit_fn=fit_fn)
    cols = ordered_map(job, range(B), workers)
    est = np.column_stack(cols)
    lo, hi = percentile_interval(est, level)
    pt = np.asarray(fit_fn(ds, config, seed)(ds.X), float) if point else None
    return BootstrapResult(B, level, seed, est, lo, hi, pt)
