"""Regression tree on the score coordinates.

Growth is greedy binary partitioning on within-node SSE reduction. The
grown tree is pruned by weakest-link cost-complexity, with the complexity
parameter picked by K-fold cross-validation. Complexity values (``cp``)
are reported relative to the root SSE, as in rpart.

Conventions
-----------
* candidate thresholds are midpoints between consecutive distinct values;
* a unit goes left iff its value is ``<= threshold``;
* both children of a split hold at least ``min_node_size`` units;
* a node is split only if the SSE reduction is at least
  ``cp_floor * root_sse``;
* near-equal gains (within ``TIE_RTOL * node_sse``) are ties, resolved by
  lower axis index, then smaller threshold.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .seeding import make_rng

TIE_RTOL = 1e-10
SCORE_AXES = ("propensity", "prognostic")
SCHEMA_VERSION = 1


@dataclass
class Node:
    id: int
    n: int
    sse: float
    effect: float
    depth: int = 0
    axis: Optional[int] = None
    threshold: Optional[float] = None
    left: Optional["Node"] = None
    right: Optional["Node"] = None
    collapse_alpha: float = np.inf  # absolute alpha at which this split is pruned

    @property
    def is_leaf(self) -> bool:
        return self.left is None

    def walk(self):
        yield self
        if not self.is_leaf:
            yield from self.left.walk()
            yield from self.right.walk()

    def leaves(self):
        return [nd for nd in self.walk() if nd.is_leaf]


@dataclass
class CateTree:
    root: Node
    axes: tuple = SCORE_AXES
    min_node_size: int = 20
    cp_floor: float = 0.01
    cp_selected: Optional[float] = None
    complexity_path: list = field(default_factory=list)

    # ---------------------------------------------------------- queries
    @property
    def root_sse(self) -> float:
        return self.root.sse

    def nodes(self):
        return list(self.root.walk())

    def leaves(self):
        return self.root.leaves()

    @property
    def n_leaves(self) -> int:
        return len(self.leaves())

    def node_ids(self) -> set:
        return {nd.id for nd in self.root.walk()}

    def splits(self):
        """(axis name, threshold) for every internal node, preorder."""
        return [(self.axes[nd.axis], nd.threshold) for nd in self.root.walk() if not nd.is_leaf]

    def apply(self, F) -> np.ndarray:
        """Leaf id reached by every row of ``F``."""
        F = _features(F, len(self.axes))
        out = np.empty(F.shape[0], dtype=np.int64)
        stack = [(self.root, np.arange(F.shape[0]))]
        while stack:
            node, idx = stack.pop()
            if node.is_leaf:
                out[idx] = node.id
                continue
            go_left = F[idx, node.axis] <= node.threshold
            stack.append((node.left, idx[go_left]))
            stack.append((node.right, idx[~go_left]))
        return out

    def predict(self, F) -> np.ndarray:
        F = _features(F, len(self.axes))
        effects = {nd.id: nd.effect for nd in self.leaves()}
        ids = self.apply(F)
        return np.fromiter((effects[i] for i in ids), float, count=ids.size)

    def leaf_rectangles(self, bounds=None):
        """Axis-aligned region of each leaf as ``{leaf_id: [(lo, hi), ...]}``.

        Regions are half-open on the left: ``lo < x <= hi``.
        """
        m = len(self.axes)
        start = [(-np.inf, np.inf)] * m if bounds is None else list(bounds)
        out = {}

        def rec(node, box):
            if node.is_leaf:
                out[node.id] = box
                return
            lo, hi = box[node.axis]
            lbox, rbox = list(box), list(box)
            lbox[node.axis] = (lo, min(hi, node.threshold))
            rbox[node.axis] = (max(lo, node.threshold), hi)
            rec(node.left, lbox)
            rec(node.right, rbox)

        rec(self.root, start)
        return out

    # ---------------------------------------------------------- exports
    def to_text(self, digits: int = 4) -> str:
        lines = [f"n={self.root.n}  leaves={self.n_leaves}  cp={_fmt(self.cp_selected, digits)}"]

        def rec(node, indent, label):
            pad = "  " * indent
            if node.is_leaf:
                lines.append(
                    f"{pad}{label}leaf {node.id}: effect={node.effect:.{digits}f} n={node.n}"
                )
                return
            lines.append(f"{pad}{label}node {node.id}: n={node.n} effect={node.effect:.{digits}f}")
            name = self.axes[node.axis]
            t = f"{node.threshold:.{digits}f}"
            rec(node.left, indent + 1, f"{name} <= {t}: ")
            rec(node.right, indent + 1, f"{name} > {t}: ")

        rec(self.root, 0, "")
        return "\n".join(lines) + "\n"

    def to_dict(self) -> dict:
        nodes = []
        for nd in self.root.walk():
            entry = {"id": nd.id, "n": nd.n, "effect": nd.effect, "sse": nd.sse, "depth": nd.depth}
            if nd.is_leaf:
                entry["leaf"] = True
            else:
                entry.update(
                    leaf=False,
                    axis=self.axes[nd.axis],
                    threshold=nd.threshold,
                    left=nd.left.id,
                    right=nd.right.id,
                )
            nodes.append(entry)
        return {
            "schema_version": SCHEMA_VERSION,
            "axes": list(self.axes),
            "min_node_size": self.min_node_size,
            "cp_floor": self.cp_floor,
            "cp_selected": self.cp_selected,
            "complexity_path": self.complexity_path,
            "nodes": nodes,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, obj: dict) -> "CateTree":
        axes = tuple(obj["axes"])
        by_id = {}
        for e in obj["nodes"]:
            by_id[e["id"]] = Node(
                id=e["id"], n=e["n"], sse=e.get("sse", 0.0), effect=e["effect"],
                depth=e.get("depth", 0),
                axis=None if e.get("leaf", True) else axes.index(e["axis"]),
                threshold=e.get("threshold"),
            )
        for e in obj["nodes"]:
            if not e.get("leaf", True):
                by_id[e["id"]].left = by_id[e["left"]]
                by_id[e["id"]].right = by_id[e["right"]]
        root = by_id[obj["nodes"][0]["id"]]
        return cls(
            root=root, axes=axes, min_node_size=obj.get("min_node_size", 20),
            cp_floor=obj.get("cp_floor", 0.01), cp_selected=obj.get("cp_selected"),
            complexity_path=obj.get("complexity_path", []),
        )

    @classmethod
    def from_json(cls, text: str) -> "CateTree":
        return cls.from_dict(json.loads(text))


def _fmt(v, digits):
    return "NA" if v is None else f"{v:.{digits}g}"


def _features(F, m):
    if hasattr(F, "as_matrix"):
        F = F.as_matrix()
    F = np.asarray(F, float)
    if F.ndim == 1:
        F = F[:, None] if m == 1 else F[None, :]
    if F.shape[1] != m:
        raise ValueError(f"expected {m} feature columns, got {F.shape[1]}")
    return F


# ------------------------------------------------------------------ growth


def _sse(y):
    if y.size == 0:
        return 0.0
    r = y - y.mean()
    return float(r @ r)


def best_split(F, y, min_node_size):
    """Best (gain, axis, threshold) over all axes, or None.

    Gains use centred cumulative sums: SSE reduction of a split into L/R
    equals S_L^2/n_L + S_R^2/n_R - S^2/n with S the sum of centred y.
    """
    n = y.size
    yc = y - y.mean()
    sse = float(yc @ yc)
    total = yc.sum()
    cands = []
    for a in range(F.shape[1]):
        order = np.argsort(F[:, a], kind="stable")
        v = F[order, a]
        s_left = np.cumsum(yc[order])[:-1]
        n_left = np.arange(1, n)
        ok = (v[:-1] < v[1:]) & (n_left >= min_node_size) & (n - n_left >= min_node_size)
        if not ok.any():
            continue
        pos = np.flatnonzero(ok)
        nl = n_left[pos].astype(float)
        sl = s_left[pos]
        sr = total - sl
        gain = sl * sl / nl + sr * sr / (n - nl) - total * total / n
        k = int(np.argmax(gain))
        g = float(gain[k])
        # within-axis ties: argmax already returns the smallest threshold, but
        # near-equal gains need the tolerance too
        near = np.flatnonzero(gain >= g - TIE_RTOL * sse)
        k = int(near[0])
        i = pos[k]
        thr = 0.5 * (v[i] + v[i + 1])
        if not (v[i] <= thr < v[i + 1]):
            thr = v[i]
        cands.append((float(gain[k]), a, float(thr), g))
    if not cands:
        return None
    top = max(c[3] for c in cands)
    for gain, a, thr, gmax in cands:  # axis order
        if gmax >= top - TIE_RTOL * sse:
            return gain, a, thr
    return None


def grow_tree(scores, y_tilde, min_node_size: int = 20, cp_floor: float = 0.01,
              axes: Sequence[str] = SCORE_AXES) -> CateTree:
    """Grow an unpruned tree predicting ``y_tilde`` from the score columns."""
    y = np.asarray(getattr(y_tilde, "y_tilde", y_tilde), float).ravel()
    F = _features(scores, len(axes))
    if F.shape[0] != y.size:
        raise ValueError("scores and targets differ in length")
    if min_node_size < 1:
        raise ValueError("min_node_size must be >= 1")
    root_sse = _sse(y)
    min_gain = cp_floor * root_sse
    counter = [0]

    def build(idx, depth):
        yy = y[idx]
        node = Node(id=counter[0], n=int(idx.size), sse=_sse(yy), effect=float(yy.mean()), depth=depth)
        counter[0] += 1
        if idx.size < 2 * min_node_size or np.ptp(yy) == 0:
            return node
        found = best_split(F[idx], yy, min_node_size)
        if found is None:
            return node
        gain, axis, thr = found
        if gain <= TIE_RTOL * node.sse or gain < min_gain:
            return node
        node.axis, node.threshold = axis, thr
        go_left = F[idx, axis] <= thr
        node.left = build(idx[go_left], depth + 1)
        node.right = build(idx[~go_left], depth + 1)
        return node

    root = build(np.arange(y.size), 0)
    tree = CateTree(root=root, axes=tuple(axes), min_node_size=min_node_size, cp_floor=cp_floor)
    _assign_collapse_alphas(tree)
    return tree


# ----------------------------------------------------------------- pruning


def _assign_collapse_alphas(tree: CateTree) -> list:
    """Weakest-link sequence; sets ``collapse_alpha`` on internal nodes.

    Returns the increasing list of alphas at which the subtree changes,
    starting with 0 for the full tree.
    """
    internal = [nd for nd in tree.root.walk() if not nd.is_leaf]
    for nd in tree.root.walk():
        nd.collapse_alpha = np.inf
    alive = {nd.id: nd for nd in internal}
    alphas = [0.0]

    def stats(node):
        if node.is_leaf or node.id not in alive:
            return node.sse, 1
        ls, ll = stats(node.left)
        rs, rl = stats(node.right)
        return ls + rs, ll + rl

    while alive:
        g = {}
        for nid, nd in alive.items():
            r_sub, leaves = stats(nd)
            g[nid] = (nd.sse - r_sub) / (leaves - 1)
        alpha = max(min(g.values()), alphas[-1])
        scale = max(tree.root.sse, 1e-300)
        weakest = [nid for nid, v in g.items() if v <= alpha + 1e-12 * scale]
        for nid in weakest:
            if nid not in alive:
                continue
            for sub in alive[nid].walk():
                if sub.id in alive:
                    sub.collapse_alpha = alpha
                    del alive[sub.id]
        if alpha > alphas[-1]:
            alphas.append(alpha)
    return alphas


def prune_sequence(tree: CateTree) -> list:
    alphas = sorted({0.0} | {nd.collapse_alpha for nd in tree.root.walk() if not nd.is_leaf})
    return alphas


def subtree(tree: CateTree, alpha: float) -> CateTree:
    """Subtree that is optimal at absolute complexity ``alpha``."""

    def copy(node):
        new = replace(node, left=None, right=None)
        if node.is_leaf or node.collapse_alpha <= alpha:
            new.axis = new.threshold = None
            return new
        new.left, new.right = copy(node.left), copy(node.right)
        return new

    return replace(tree, root=copy(tree.root), complexity_path=list(tree.complexity_path))


def _fold_ids(n, folds, rng):
    ids = np.empty(n, dtype=int)
    ids[rng.permutation(n)] = np.arange(n) % folds
    return ids


def prune_tree(tree: CateTree, scores, y_tilde, folds: int = 10, seed: int = 0,
               rule: str = "min-cv") -> CateTree:
    """Cost-complexity prune ``tree`` with ``folds``-fold cross-validation.

    Each subtree in the weakest-link sequence is scored at the geometric
    mean of its alpha interval; fold trees are grown with the same settings
    and pruned at the same relative cp. ``rule='min-cv'`` takes the minimum
    CV error (ties to the simpler tree); ``'one-se'`` the simplest tree
    within one standard error of that minimum.
    """
    y = np.asarray(getattr(y_tilde, "y_tilde", y_tilde), float).ravel()
    F = _features(scores, len(tree.axes))
    n = y.size
    if folds > n:
        raise ValueError(f"folds ({folds}) exceeds sample size ({n})")
    if folds < 2:
        raise ValueError("folds must be >= 2")
    if rule not in ("min-cv", "one-se"):
        raise ValueError(f"unknown cp rule {rule!r}")
    alphas = prune_sequence(tree)
    root_sse = tree.root_sse
    if len(alphas) == 1:
        out = subtree(tree, np.inf)
        out.cp_selected = 0.0
        out.complexity_path = [{"cp": 0.0, "n_leaves": 1, "cv_error": None, "cv_se": None}]
        return out
    scale = root_sse if root_sse > 0 else 1.0
    rel = [a / scale for a in alphas]
    eval_rel = []
    for k in range(len(rel)):
        if k == 0:
            eval_rel.append(0.0)
        elif k == len(rel) - 1:
            eval_rel.append(np.inf)
        else:
            eval_rel.append(float(np.sqrt(rel[k] * rel[k + 1])))

    ids = _fold_ids(n, folds, make_rng(seed, "tree-cv"))
    sq = np.zeros((n, len(rel)))
    for k in range(folds):
        test = ids == k
        if not test.any():
            continue
        ft = grow_tree(F[~test], y[~test], tree.min_node_size, tree.cp_floor, tree.axes)
        fscale = ft.root_sse if ft.root_sse > 0 else 1.0
        for j, cp in enumerate(eval_rel):
            pred = subtree(ft, cp * fscale).predict(F[test])
            sq[test, j] = (y[test] - pred) ** 2
    cv_err = sq.mean(axis=0)
    cv_se = sq.std(axis=0, ddof=1) / np.sqrt(n) if n > 1 else np.zeros_like(cv_err)
    best = min(range(len(rel)), key=lambda j: (cv_err[j], -j))
    err_min = cv_err[best]
    if rule == "one-se":
        limit = err_min + cv_se[best]
        best = max(j for j in range(len(rel)) if cv_err[j] <= limit)
    else:
        ties = [j for j in range(len(rel)) if cv_err[j] <= err_min]
        best = max(ties)
    path = []
    for j, a in enumerate(alphas):
        path.append({
            "cp": rel[j],
            "n_leaves": subtree(tree, a).n_leaves,
            "cv_error": float(cv_err[j]),
            "cv_se": float(cv_se[j]),
        })
    out = subtree(tree, alphas[best])
    out.cp_selected = rel[best]
    out.complexity_path = path
    return out


def fit_tree(scores, y_tilde, min_node_size=20, cp_floor=0.01, folds=10, seed=0,
             rule="min-cv", axes=SCORE_AXES) -> CateTree:
    grown = grow_tree(scores, y_tilde, min_node_size, cp_floor, axes)
    return prune_tree(grown, scores, y_tilde, folds, seed, rule)


# -------------------------------------------------------------------- grid


@dataclass(frozen=True)
class Grid:
    e_centers: np.ndarray
    p_centers: np.ndarray
    effect: np.ndarray  # (len(p_centers), len(e_centers))

    def rows(self):
        for i, p in enumerate(self.p_centers):
            for j, e in enumerate(self.e_centers):
                yield float(e), float(p), float(self.effect[i, j])

    def to_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("e,p,effect\n")
            for e, p, v in self.rows():
                fh.write(f"{e!r},{p!r},{v!r}\n")


def export_grid(tree: CateTree, e_range, p_range, resolution=50) -> Grid:
    """Raster of predicted effects at cell centres over the score plane."""
    if np.isscalar(resolution):
        res_e = res_p = int(resolution)
    else:
        res_e, res_p = (int(r) for r in resolution)
    if res_e < 2 or res_p < 2:
        raise ValueError("resolution must be >= 2 per axis")
    (e0, e1), (p0, p1) = e_range, p_range
    if not (e1 > e0 and p1 > p0):
        raise ValueError("empty range")
    e_edges = np.linspace(e0, e1, res_e + 1)
    p_edges = np.linspace(p0, p1, res_p + 1)
    ec = 0.5 * (e_edges[:-1] + e_edges[1:])
    pc = 0.5 * (p_edges[:-1] + p_edges[1:])
    EE, PP = np.meshgrid(ec, pc)
    eff = tree.predict(np.column_stack([EE.ravel(), PP.ravel()])).reshape(EE.shape)
    return Grid(ec, pc, eff)
