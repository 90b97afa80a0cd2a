import json

import numpy as np
import pytest

from ppcate.data import Dataset
from ppcate.inference import (
    BootstrapError,
    BootstrapResult,
    bootstrap_ci,
    coverage,
    draw_resample,
    mse,
    order_statistic_index,
    percentile_interval,
)
from ppcate.pipeline import PipelineConfig
from ppcate.simulation import ScenarioSpec, generate


def zero_fit(resample, config, seed):
    return lambda X: np.zeros(X.shape[0])


def noisy_fit(resample, config, seed):
    # estimate depends on the resample, so intervals have width
    m = resample.Y.mean()
    return lambda X: np.full(X.shape[0], m) + X[:, 0]


def test_mse_examples():
    t = np.array([0.0, 1.0, 2.0])
    assert mse(t, t) == 0.0
    assert mse(t + 1, t) == 1.0
    a = np.array([0.3, -1.2, 2.0, 0.0, 5.5])
    b = np.array([0.1, 0.0, 2.5, -1.0, 5.0])
    hand = (0.04 + 1.44 + 0.25 + 1.0 + 0.25) / 5
    assert mse(a, b) == pytest.approx(hand, rel=1e-15)
    with pytest.raises(ValueError):
        mse(a, b[:3])


def test_order_statistic_convention():
    # 1-based k = ceil(q * B), kept inside [1, B]
    assert order_statistic_index(0.025, 1000) == 25
    assert order_statistic_index(0.975, 1000) == 975
    assert order_statistic_index(0.5, 3) == 2
    assert order_statistic_index(0.0, 10) == 1
    assert order_statistic_index(1.0, 10) == 10


def test_percentile_matches_inverted_cdf():
    rng = np.random.default_rng(0)
    est = rng.normal(size=(7, 1000))
    lo, hi = percentile_interval(est, 0.95)
    np.testing.assert_array_equal(lo, np.quantile(est, 0.025, axis=1, method="inverted_cdf"))
    np.testing.assert_array_equal(hi, np.quantile(est, 0.975, axis=1, method="inverted_cdf"))
    s = np.sort(est, axis=1)
    np.testing.assert_array_equal(lo, s[:, 24])
    np.testing.assert_array_equal(hi, s[:, 974])


def test_coverage_examples():
    tau = np.zeros(4)
    wide = BootstrapResult(2, 0.95, 0, np.zeros((4, 2)), -np.ones(4), np.ones(4))
    assert coverage(wide, tau) == 1.0
    point = BootstrapResult(2, 0.95, 0, np.zeros((4, 2)), np.zeros(4), np.zeros(4))
    assert coverage(point, np.ones(4)) == 0.0
    with pytest.raises(ValueError):
        coverage(point, np.ones(3))


def test_coverage_permutation_invariant():
    rng = np.random.default_rng(1)
    lo = rng.normal(size=50)
    hi = lo + rng.uniform(size=50)
    tau = rng.normal(size=50)
    perm = rng.permutation(50)
    a = BootstrapResult(2, 0.9, 0, np.zeros((50, 2)), lo, hi)
    b = BootstrapResult(2, 0.9, 0, np.zeros((50, 2)), lo[perm], hi[perm])
    assert coverage(a, tau) == coverage(b, tau[perm])


def test_constant_stub_gives_degenerate_intervals(small_ds):
    res = bootstrap_ci(small_ds, B=20, seed=3, fit_fn=zero_fit)
    assert np.all(res.lo == 0) and np.all(res.hi == 0)
    assert res.estimates.shape == (small_ds.n, 20)


def test_deterministic_and_nested_levels(small_ds):
    a = bootstrap_ci(small_ds, B=50, seed=9, fit_fn=noisy_fit)
    b = bootstrap_ci(small_ds, B=50, seed=9, fit_fn=noisy_fit)
    np.testing.assert_array_equal(a.estimates, b.estimates)
    assert np.all(a.lo <= a.hi)
    prev = a.at_level(0.5)
    for level in (0.8, 0.9, 0.95, 0.99):
        cur = a.at_level(level)
        assert np.all(cur.lo <= prev.lo) and np.all(cur.hi >= prev.hi)
        prev = cur
    c = bootstrap_ci(small_ds, B=50, seed=10, fit_fn=noisy_fit)
    assert not np.array_equal(a.estimates, c.estimates)


def test_resamples_keep_both_arms():
    Z = np.zeros(12)
    Z[0] = 1
    for b in range(50):
        idx = draw_resample(12, Z, 4, b)
        assert Z[idx].min() == 0 and Z[idx].max() == 1
    with pytest.raises(BootstrapError):
        draw_resample(5, np.zeros(5), 0, 0)


def test_full_pipeline_bootstrap_and_exports(tmp_path):
    ds = generate(ScenarioSpec(1, 400, 2, seed=5))
    res = bootstrap_ci(ds, PipelineConfig(), B=10, seed=2)
    assert res.point is not None and res.lo.shape == (400,)
    res.to_csv(tmp_path / "i.csv")
    rows = (tmp_path / "i.csv").read_text().splitlines()
    assert rows[0] == "index,estimate,lo,hi" and len(rows) == 401
    s = json.loads(res.summary_json(ds.tau_true))
    assert 0.0 <= s["coverage"] <= 1.0 and s["B"] == 10 and s["seed"] == 2
    assert "coverage" not in res.summary()


def test_bootstrap_argument_checks(small_ds):
    with pytest.raises(ValueError):
        bootstrap_ci(small_ds, B=1, fit_fn=zero_fit)
    with pytest.raises(ValueError):
        bootstrap_ci(small_ds, B=5, level=1.0, fit_fn=zero_fit)


@pytest.mark.slow
def test_interval_width_shrinks_with_n():
    widths = []
    for n in (500, 2000):
        ds = generate(ScenarioSpec(1, n, 2, seed=31, coef_seed=31))
        res = bootstrap_ci(ds, PipelineConfig(), B=100, seed=7)
        widths.append(float(np.mean(res.width)))
    assert widths[1] < widths[0]
