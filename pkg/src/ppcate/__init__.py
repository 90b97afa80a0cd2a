"""Heterogeneous treatment effects from propensity and prognostic scores.

Fit both scores, build proxy individual effects by K-nearest-neighbour
matching across arms in score space, then grow and prune a regression tree
on the two scores. Percentile-bootstrap intervals and a scenario simulator
with known effects round it out.
"""
from .data import (
    Dataset,
    OverlapReport,
    SchemaError,
    ScoredSample,
    ValidationError,
    check_overlap,
    read_csv,
    validate,
    write_csv,
)
from .inference import BootstrapResult, bootstrap_ci, coverage, mse
from .matching import MatchResult, default_k, match_knn, proxy_ite
from .pipeline import FittedPipeline, PipelineConfig, fit_pipeline
from .scores import RankDeficientError, ScoreModel, fit_scores
from .seeding import derive_seed, make_rng
from .simulation import BenchmarkReport, ScenarioSpec, run_benchmark, simulate, sweep_k
from .tree import CateTree, export_grid, fit_tree

__version__ = "0.1.0"

__all__ = [
    "BenchmarkReport", "BootstrapResult", "CateTree", "Dataset", "FittedPipeline",
    "MatchResult", "OverlapReport", "PipelineConfig", "RankDeficientError",
    "ScenarioSpec", "SchemaError", "ScoreModel", "ScoredSample", "ValidationError",
    "bootstrap_ci", "check_overlap", "coverage", "default_k", "derive_seed",
    "export_grid", "fit_pipeline", "fit_scores", "fit_tree", "make_rng", "match_knn",
    "mse", "proxy_ite", "read_csv", "run_benchmark", "simulate", "sweep_k",
    "validate", "write_csv",
]
