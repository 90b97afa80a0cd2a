"""Acceptance suite. Each test prints one PASS/FAIL line.

The master seed was fixed before any of these runs and is not tuned.
"""
import subprocess
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES
from ppcate.inference import mse
from ppcate.pipeline import PipelineConfig, fit_pipeline
from ppcate.seeding import derive_seed
from ppcate.simulation import (ScenarioSpec, highdim_comparison, run_benchmark, simulate,
                               sweep_k)

MASTER = 2024

pytestmark = [pytest.mark.slow, pytest.mark.acceptance]


def report(num, ok, detail):
    line = f"criterion {num}: {'PASS' if ok else 'FAIL'} ({detail})"
    print(line)
    ACCEPTANCE_LINES.append(line)
    assert ok, line


def pipeline_trials(spec, trials):
    """Fitted pipeline and its dataset for each seeded trial."""
    for t in range(trials):
        tseed = derive_seed(MASTER, f"trial-{t}")
        sim = simulate(replace(spec, seed=tseed))
        yield sim, fit_pipeline(sim.dataset, PipelineConfig(seed=tseed))


def partition_recovered(tree, e_cut=0.6, p_cut=0.0, e_tol=0.07, p_tol=0.15, eff_tol=0.15):
    splits = tree.splits()
    e_ok = any(ax == "propensity" and abs(th - e_cut) <= e_tol for ax, th in splits)
    p_ok = any(ax == "prognostic" and abs(th - p_cut) <= p_tol for ax, th in splits)
    effects = {nd.id: nd.effect for nd in tree.leaves()}
    active = [lid for lid, box in tree.leaf_rectangles().items()
              if box[0][1] <= e_cut + e_tol and box[1][1] <= p_cut + p_tol]
    eff_ok = bool(active) and all(abs(effects[lid] - 1.0) <= eff_tol for lid in active)
    return e_ok, p_ok, eff_ok


def test_criterion_1_partition_recovery():
    t0 = time.perf_counter()
    flags = [partition_recovered(fp.tree)
             for _, fp in pipeline_trials(ScenarioSpec(1, 5000, 10), 20)]
    hits = sum(all(f) for f in flags)
    e_hits, p_hits, eff_hits = (sum(f[i] for f in flags) for i in range(3))
    secs = time.perf_counter() - t0
    report(1, hits >= 14 and secs <= 300,
           f"{hits}/20 trials recover the partition, need >= 14; e-boundary {e_hits}, "
           f"p-boundary {p_hits}, active effects {eff_hits}; {secs:.0f}s")


def test_criterion_2_coverage():
    t0 = time.perf_counter()
    rep = run_benchmark(ScenarioSpec(1, 1000, 2), ["pp"], trials=20, seed=MASTER,
                        bootstrap_B=200)
    cov = rep.mean_coverage("pp")
    secs = time.perf_counter() - t0
    report(2, not rep.failures and abs(cov - 0.981) <= 0.05 and secs <= 1200,
           f"mean coverage {cov:.4f}, target 0.981 +/- 0.05; {secs:.0f}s")


def test_criterion_3_null_scenarios():
    mse5 = [mse(fp.predict_scores(fp.scores), sim.dataset.tau_true)
            for sim, fp in pipeline_trials(ScenarioSpec(5, 4000, 10), 20)]
    mse6, abs6 = [], []
    for sim, fp in pipeline_trials(ScenarioSpec(6, 1000, 2), 20):
        tau_hat = fp.predict_scores(fp.scores)
        mse6.append(mse(tau_hat, sim.dataset.tau_true))
        abs6.append(float(np.mean(np.abs(tau_hat))))
    m5, m6, a6 = np.mean(mse5), np.mean(mse6), np.mean(abs6)
    report(3, m5 < 0.5 and m6 < 0.05 and a6 < 0.1,
           f"scenario 5 MSE {m5:.4f} < 0.5; scenario 6 MSE {m6:.4f} < 0.05, "
           f"mean |tau_hat| {a6:.4f} < 0.1")


def test_criterion_4_single_score_dominance():
    rep = run_benchmark(ScenarioSpec(1, 5000, 10), ["pp", "psm", "prog"], trials=20,
                        seed=MASTER)
    pp, psm, prog = (np.array(rep.mse[m], float) for m in ("pp", "psm", "prog"))
    wins = int(np.sum((pp < psm) & (pp < prog)))
    report(4, not rep.failures and wins >= 18,
           f"PP best in {wins}/20 trials, need >= 18; mean MSE pp {pp.mean():.4f}, "
           f"psm {psm.mean():.4f}, prog {prog.mean():.4f}")


def test_criterion_5_k_sweep():
    res = dict(sweep_k(ScenarioSpec(1, 5000, 10), [1, 5, 10, 20], trials=10, seed=MASTER))
    report(5, res[10] < res[1],
           "mean MSE by K " + ", ".join(f"{k}: {v:.5f}" for k, v in res.items()))


ORACLE_TESTS = [
    "test_matching.py::test_oracle_equivalence",
    "test_tree.py::test_growth_matches_exhaustive_oracle",
    "test_scores.py::test_gradient_below_tolerance",
    "test_lasso.py::test_gaussian_path_kkt",
    "test_lasso.py::test_logistic_path_kkt",
    "test_scores.py::test_finite_differences",
]


def test_criterion_6_oracle_suite():
    here = Path(__file__).parent
    t0 = time.perf_counter()
    res = subprocess.run([sys.executable, "-m", "pytest", "-q", "-p", "no:cacheprovider",
                          *(str(here / t) for t in ORACLE_TESTS)],
                         capture_output=True, text=True, cwd=here.parent)
    secs = time.perf_counter() - t0
    tail = res.stdout.strip().splitlines()[-1] if res.stdout.strip() else res.stderr[-200:]
    report(6, res.returncode == 0 and secs <= 120, f"{tail}; {secs:.0f}s")


def test_criterion_7_high_dimensional():
    t0 = time.perf_counter()
    rows = highdim_comparison(ScenarioSpec.default(7), trials=5, seed=MASTER)
    secs = time.perf_counter() - t0
    rec = np.mean([r["recovered"] for r in rows])
    ml = np.mean([r["mse_lasso"] for r in rows])
    mb = np.mean([r["mse_baseline"] for r in rows])
    report(7, rec >= 4 and ml < mb and secs <= 600,
           f"mean recovered {rec:.1f}/6, MSE lasso {ml:.4f} vs baseline {mb:.4f}; {secs:.0f}s")
