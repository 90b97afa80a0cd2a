"""End-to-end estimator: scores -> matching -> pruned tree."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Optional, Union

import numpy as np

from .data import Dataset, OverlapReport, ScoredSample, check_overlap, require_valid
from .matching import MatchResult, ProxyEffects, default_k, match_knn, proxy_ite
from .scores import ScoreModel, fit_scores
from .tree import CateTree, fit_tree


@dataclass(frozen=True)
class PipelineConfig:
    penalty: str = "auto"  # none | lasso | auto
    k: Union[int, str] = "auto"
    min_node_size: int = 20
    cp_rule: str = "min-cv"  # min-cv | one-se
    cp_floor: float = 0.01
    tree_folds: int = 10
    lasso_folds: int = 10
    B: int = 1000
    level: float = 0.95
    seed: int = 0
    standardize_prognostic: bool = False
    eps: float = 0.05
    prognostic_link: str = "identity"

    def __post_init__(self):
        problems = []
        if self.penalty not in ("none", "lasso", "auto"):
            problems.append(f"penalty must be none|lasso|auto, got {self.penalty!r}")
        if not (self.k == "auto" or (isinstance(self.k, (int, np.integer)) and self.k >= 1)):
            problems.append(f"k must be 'auto' or a positive integer, got {self.k!r}")
        if self.min_node_size < 1:
            problems.append("min_node_size must be >= 1")
        if self.cp_rule not in ("min-cv", "one-se"):
            problems.append(f"cp_rule must be min-cv|one-se, got {self.cp_rule!r}")
        if self.cp_floor < 0:
            problems.append("cp_floor must be >= 0")
        if self.tree_folds < 2 or self.lasso_folds < 2:
            problems.append("fold counts must be >= 2")
        if self.B < 2:
            problems.append("B must be >= 2")
        if not (0 < self.level < 1):
            problems.append("level must lie in (0, 1)")
        if not (0 < self.eps < 0.5):
            problems.append("eps must lie in (0, 0.5)")
        if self.prognostic_link not in ("identity", "logit"):
            problems.append("prognostic_link must be identity|logit")
        if problems:
            raise ValueError("; ".join(problems))

    def resolve_k(self, n: int) -> int:
        return default_k(n) if self.k == "auto" else int(self.k)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["k"] = self.k if self.k == "auto" else int(self.k)
        return out

    @classmethod
    def from_dict(cls, obj: dict) -> "PipelineConfig":
        known = {f for f in cls.__dataclass_fields__}
        return cls(**{k: v for k, v in obj.items() if k in known})


@dataclass
class FittedPipeline:
    config: PipelineConfig
    score_model: ScoreModel
    tree: CateTree
    K: int
    scores: Optional[ScoredSample] = None
    match: Optional[MatchResult] = None
    proxy: Optional[ProxyEffects] = None
    overlap: Optional[OverlapReport] = None
    notes: dict = field(default_factory=dict)

    def score(self, X) -> ScoredSample:
        return self.score_model.score(X)

    def predict(self, X) -> np.ndarray:
        return self.tree.predict(self.score(X))

    def predict_scores(self, scores: ScoredSample) -> np.ndarray:
        return self.tree.predict(scores)


def fit_pipeline(ds: Dataset, config: PipelineConfig = PipelineConfig(), seed: Optional[int] = None,
                 validate: bool = True) -> FittedPipeline:
    """Fit score models, build proxy effects by K-NN matching, fit the tree."""
    if validate:
        require_valid(ds)
    seed = config.seed if seed is None else seed
    model = fit_scores(ds, config.penalty, config.lasso_folds, seed, config.prognostic_link)
    scores = model.score(ds.X)
    K = config.resolve_k(ds.n)
    match = match_knn(ds, scores, K, config.standardize_prognostic)
    proxy = proxy_ite(ds, match)
    tree = fit_tree(scores, proxy, config.min_node_size, config.cp_floor,
                    config.tree_folds, seed, config.cp_rule)
    return FittedPipeline(
        config=config, score_model=model, tree=tree, K=match.K, scores=scores,
        match=match, proxy=proxy, overlap=check_overlap(scores, config.eps),
        notes={"k_clamped": match.clamped},
    )
