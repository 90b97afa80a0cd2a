import json
import math

import numpy as np
import pytest
from scipy import optimize

from ppcate.data import Dataset, ScoredSample
from ppcate.inference import mse
from ppcate.pipeline import PipelineConfig
from ppcate.scores import sigmoid
from ppcate.simulation import (
    S2_LOGIT_TERMS,
    S7_LOGIT,
    S7_PROG,
    ScenarioSpec,
    baseline_single_score,
    beta24_pdf,
    generate,
    highdim_comparison,
    run_benchmark,
    simulate,
    sweep_k,
    true_effect,
    truncated_scores,
)


@pytest.mark.parametrize("n", [4000, 101])
def test_scenario5_balanced_and_null(n):
    ds = generate(ScenarioSpec(5, n, 10, seed=3))
    assert np.all(ds.tau_true == 0)
    assert ds.Z.sum() == math.ceil(n / 2)


def test_scenario5_noise_variance():
    spec = ScenarioSpec(5, 10000, 10, seed=1)
    sim = simulate(spec)
    eps = sim.dataset.Y - sim.p
    assert abs(eps.var() / 90.0 - 1) < 0.05
    np.testing.assert_allclose(sim.p, 1 + sim.dataset.X.sum(axis=1))


def test_scenario4_three_levels():
    sim = simulate(ScenarioSpec(4, 3000, 10, seed=2))
    tau = sim.dataset.tau_true
    assert set(np.unique(tau)) <= {0.0, 1.0, 2.0}
    lo_e, lo_p = sim.e <= 0.6, sim.p <= 0
    assert np.all(tau[lo_e & lo_p] == 0)
    assert np.all(tau[~lo_e & ~lo_p] == 2)
    assert np.all(tau[lo_e ^ lo_p] == 1)


def test_scenario6_propensity_range():
    res = optimize.minimize_scalar(lambda x: -beta24_pdf(x), bounds=(0, 1), method="bounded",
                                   options={"xatol": 1e-12})
    assert res.x == pytest.approx(0.25, abs=1e-6)
    assert -res.fun == pytest.approx(2.109375, abs=1e-9)
    sim = simulate(ScenarioSpec(6, 5000, 2, seed=4))
    assert sim.e.min() >= 0.25 and sim.e.max() <= 0.25 * (1 + 2.109375) + 1e-12
    assert 0.25 * (1 + 2.109375) == pytest.approx(0.7773, abs=1e-4)
    assert np.all(sim.dataset.tau_true == 0)
    np.testing.assert_allclose(sim.p, 2 * sim.dataset.X[:, 0] - 1)


@pytest.mark.parametrize("sid, d", [(1, 2), (1, 10), (2, 10), (3, 10), (7, 50)])
def test_stored_effect_matches_formula(sid, d):
    spec = ScenarioSpec(sid, 800, d, seed=5)
    sim = simulate(spec)
    tau = ((sim.e < 0.6) & (sim.p < 0)).astype(float)
    np.testing.assert_array_equal(sim.dataset.tau_true, tau)
    np.testing.assert_array_equal(true_effect(spec, sim.e, sim.p), tau)
    ds = sim.dataset
    resid = ds.Y - sim.p - ds.Z * tau
    assert abs(resid.mean()) < 0.15 and abs(resid.std() - 1) < 0.1


def test_scenario_models():
    sim = simulate(ScenarioSpec(7, 200, 30, seed=6))
    X = sim.dataset.X
    np.testing.assert_allclose(sim.e, sigmoid(X[:, :6] @ S7_LOGIT))
    np.testing.assert_allclose(sim.p, X[:, :6] @ S7_PROG)
    sim2 = simulate(ScenarioSpec(2, 300, 10, seed=7))
    X = sim2.dataset.X
    extra = sum(w * X[:, i - 1] * X[:, j - 1] for i, j, w in S2_LOGIT_TERMS)
    np.testing.assert_allclose(sim2.e, sigmoid(X @ sim2.beta_e + extra))
    assert sim2.beta_e.min() >= -1 and sim2.beta_e.max() <= 1


def test_generate_is_deterministic():
    a = generate(ScenarioSpec(1, 300, 3, seed=11))
    b = generate(ScenarioSpec(1, 300, 3, seed=11))
    for f in ("X", "Z", "Y", "tau_true"):
        np.testing.assert_array_equal(getattr(a, f), getattr(b, f))
    c = generate(ScenarioSpec(1, 300, 3, seed=12))
    assert not np.array_equal(a.X, c.X)


def test_coefficients_can_be_held_fixed():
    a = simulate(ScenarioSpec(1, 100, 4, seed=1, coef_seed=99))
    b = simulate(ScenarioSpec(1, 100, 4, seed=2, coef_seed=99))
    np.testing.assert_array_equal(a.beta_e, b.beta_e)
    assert not np.array_equal(a.dataset.X, b.dataset.X)


def test_spec_errors_and_defaults():
    with pytest.raises(ValueError, match="unsupported"):
        ScenarioSpec(8, 100, 2)
    with pytest.raises(ValueError):
        ScenarioSpec(2, 100, 5)
    assert (ScenarioSpec.default(7).n, ScenarioSpec.default(7).d) == (600, 1000)
    full = ScenarioSpec.default(7, full_scale=True)
    assert (full.n, full.d) == (3000, 5000)


def test_benchmark_single_trial_scenario5():
    rep = run_benchmark(ScenarioSpec(5, 400, 10), ["pp"], trials=1, seed=3)
    assert len(rep.mse["pp"]) == 1 and rep.mse["pp"][0] >= 0
    obj = json.loads(rep.to_json())
    assert obj["schema_version"] == 1 and obj["summary"]["pp"]["mean_mse"] >= 0
    assert rep.failures == []


def test_benchmark_trials_independent_of_order():
    spec = ScenarioSpec(1, 300, 2)
    rep = run_benchmark(spec, ["pp", "psm"], trials=3, seed=4)
    again = run_benchmark(spec, ["pp", "psm"], trials=3, seed=4)
    assert rep.mse == again.mse
    assert len(set(rep.trial_seeds)) == 3
    with pytest.raises(ValueError):
        run_benchmark(spec, ["forest"], trials=1)
    with pytest.raises(ValueError):
        run_benchmark(spec, ["pp"], trials=0)


def test_benchmark_records_failures():
    # unpenalised scores cannot be fitted with more covariates than units
    rep = run_benchmark(ScenarioSpec(7, 40, 60), ["pp"], trials=2, seed=1,
                        config=PipelineConfig(penalty="none"))
    assert rep.mse["pp"] == [None, None]
    assert [f["trial"] for f in rep.failures] == [0, 1]
    assert "RankDeficientError" in rep.failures[0]["error"]


def test_benchmark_with_bootstrap_coverage():
    rep = run_benchmark(ScenarioSpec(1, 300, 2), ["pp"], trials=1, seed=2, bootstrap_B=5)
    cov = rep.coverage["pp"][0]
    assert 0.0 <= cov <= 1.0 and rep.summary()["pp"]["mean_coverage"] == cov


def test_single_score_baselines():
    n = 200
    rng = np.random.default_rng(0)
    ds = Dataset(rng.normal(size=(n, 2)), rng.integers(0, 2, n), np.full(n, 2.0))
    sc = ScoredSample(np.full(n, 0.4), rng.normal(size=n))
    tau, tree = baseline_single_score(ds, sc, "propensity", 5)
    assert np.all(tau == 0.0)
    tau2, _ = baseline_single_score(ds, sc, "propensity", 5)
    np.testing.assert_array_equal(tau, tau2)
    with pytest.raises(ValueError):
        baseline_single_score(ds, sc, "both", 5)
    ds1 = generate(ScenarioSpec(1, 1000, 2, seed=3))
    from ppcate.scores import fit_scores
    scores = fit_scores(ds1).score(ds1.X)
    tau_p, tree_p = baseline_single_score(ds1, scores, "prognostic", 7)
    assert tree_p.axes == ("prognostic",) and mse(tau_p, ds1.tau_true) >= 0


def test_sweep_k_and_clamp():
    spec = ScenarioSpec(1, 200, 2)
    rows = sweep_k(spec, [1, 3], trials=2, seed=1)
    assert [k for k, _ in rows] == [1, 3] and all(v >= 0 for _, v in rows)
    with pytest.raises(ValueError):
        sweep_k(spec, [], trials=1)
    # K beyond the arm size behaves as full-arm averaging
    ds = generate(ScenarioSpec(1, 80, 2, seed=2))
    from ppcate.matching import knn_opposite, proxy_ite
    pts = np.random.default_rng(1).uniform(size=(80, 2))
    with pytest.warns(UserWarning):
        m = knn_opposite(pts, ds.Z, 500)
    small = int(min(ds.Z.sum(), 80 - ds.Z.sum()))
    assert m.K == small


def test_truncated_scores_baseline():
    ds = generate(ScenarioSpec(7, 120, 200, seed=1))
    model = truncated_scores(ds, 60)
    assert np.all(model.alpha[60:] == 0) and np.all(model.theta[60:] == 0)
    s = model.score(ds.X)
    assert np.all(np.isfinite(s.p_hat)) and np.all((s.e_hat > 0) & (s.e_hat < 1))
    with pytest.raises(ValueError):
        highdim_comparison(ScenarioSpec(1, 100, 2))

