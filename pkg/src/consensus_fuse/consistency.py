"""Self-consistency (SC) of each expert, read off a probe forest.

The probe forest splits on the mean per-expert information gain. At every
split node j it stores, for each expert r, the mean gain over the node's whole
candidate set (Ê). An expert's path performance q at node j is the
sample-weighted mean of Ê along the root-to-j chain, and SC is the mean of q
over all split nodes (per tree, then across trees).
"""
from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass, field

import numpy as np

from .core import AnnotationSet, Roi, compute_roi
from .errors import ConsensusError
from .features import FeatureContext, feature_matrix
from .forest import Forest, ForestConfig, Tree, info_gain, train_probe

log = logging.getLogger(__name__)


def node_gain_estimate(features: np.ndarray, labels: np.ndarray, candidates) -> float:
    """Mean information gain of ``labels`` over candidate splits ``(feature, threshold)``.

    Rows with label -1 are ignored. Splits send ``x[f] <= t`` left.
    """
    candidates = list(candidates)
    if not candidates:
        raise ConsensusError("no candidate splits", "no-candidates")
    X = np.asarray(features)
    y = np.asarray(labels).ravel()
    keep = y >= 0
    if keep.sum() < 2:
        raise ConsensusError("need at least 2 labeled rows at the node", "empty-node")
    X, y = X[keep], y[keep]
    total = 0.0
    for f, t in candidates:
        go_left = X[:, f] <= t
        total += info_gain(y, y[go_left], y[~go_left])
    return total / len(candidates)


def path_performance(tree: Tree, node: int, expert: int) -> float:
    """Sample-weighted mean of stored Ê over the chain root .. node."""
    if tree.gains is None:
        raise ConsensusError("tree carries no gain estimates", "no-estimates")
    num = den = 0.0
    k = node
    while k >= 0:
        g = tree.gains[k, expert]
        if not np.isfinite(g):
            raise ConsensusError(f"node {k} has no stored estimate", "no-estimates")
        num += tree.n_samples[k] * g
        den += tree.n_samples[k]
        k = int(tree.parent[k])
    return num / den


def tree_path_performance(tree: Tree) -> np.ndarray:
    """q for every split node and every expert at once, shape (n_split, R)."""
    split = tree.split_nodes
    R = tree.gains.shape[1]
    num = np.zeros((tree.n_nodes, R))
    den = np.zeros(tree.n_nodes)
    # node ids are assigned in creation order, so a parent always precedes its children
    for j in split:
        p = tree.parent[j]
        w = tree.n_samples[j]
        num[j] = w * tree.gains[j]
        den[j] = w
        if p >= 0:
            num[j] += num[p]
            den[j] += den[p]
    return num[split] / den[split, None]


def forest_sc(forest: Forest) -> np.ndarray:
    per_tree = []
    for t in forest.trees:
        if len(t.split_nodes):
            per_tree.append(tree_path_performance(t).mean(axis=0))
    if not per_tree:
        return np.zeros(forest.meta.get("n_experts", 0))
    return np.clip(np.mean(per_tree, axis=0), 0.0, 1.0)


@dataclass
class ScReport:
    experts: list[str]
    sc: np.ndarray
    n_trees: int
    n_nodes: int
    seed: int
    per_tree: np.ndarray | None = None      # (n_trees, R) mean q per tree
    warnings: list[str] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "experts": [{"id": e, "sc": float(s)} for e, s in zip(self.experts, self.sc)],
            "n_nodes": int(self.n_nodes),
            "n_trees": int(self.n_trees),
            "seed": int(self.seed),
        }

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2)


def probe_samples(annotations: AnnotationSet, features: list[np.ndarray], rois: list[Roi]):
    """Stack ROI rows of all slices; labels are (n, R) with one column per expert."""
    X, Y = [], []
    for s, Xs, roi in zip(annotations.slices, features, rois):
        px = roi.pixels()
        cols = []
        for m in s.masks:
            if m is None:
                cols.append(np.full(len(px), -1, np.int8))
            else:
                cols.append(np.asarray(m)[px[:, 0], px[:, 1]].astype(np.int8))
        X.append(Xs)
        Y.append(np.stack(cols, axis=1))
    return np.concatenate(X), np.concatenate(Y)


def self_consistency(annotations: AnnotationSet, contexts: list[FeatureContext] | None = None,
                     rois: list[Roi] | None = None, config: ForestConfig | None = None,
                     seed: int = 0, weights=None, features: list[np.ndarray] | None = None,
                     n_jobs: int = 1) -> ScReport:
    """SC score per expert.

    Either ``contexts`` or precomputed ``features`` (rows aligned with
    ``roi.pixels()``) must be given. Missing masks, if any, contribute no labels.
    """
    config = config or ForestConfig()
    if rois is None:
        rois = [compute_roi(s.masks) for s in annotations.slices]
    if features is None:
        if contexts is None:
            raise ConsensusError("need feature contexts or feature matrices", "invalid-input")
        features = [feature_matrix(c, r.pixels(), dtype=np.float32) for c, r in zip(contexts, rois)]
    X, Y = probe_samples(annotations, features, rois)

    R = annotations.n_experts
    notes = []
    active = np.ones(R, dtype=bool)
    for r in range(R):
        lab = Y[:, r][Y[:, r] >= 0]
        if lab.size == 0 or np.all(lab == lab[0]):
            msg = f"expert {annotations.experts[r]}: single-class labels over the ROI, SC set to 0"
            warnings.warn(msg, stacklevel=2)
            notes.append(msg)
            active[r] = False
    w = np.ones(R) if weights is None else np.asarray(weights, dtype=np.float64).copy()
    w[~active] = 0.0
    sc = np.zeros(R)
    per_tree = None
    n_nodes = 0
    if w.sum() > 0:
        forest = train_probe(X, Y, config, seed, weights=w, n_jobs=n_jobs)
        sc = forest_sc(forest)
        sc[~active] = 0.0
        per_tree = np.array([tree_path_performance(t).mean(axis=0) if len(t.split_nodes)
                             else np.zeros(R) for t in forest.trees])
        n_nodes = sum(t.n_nodes for t in forest.trees)
    log.info("SC %s", np.round(sc, 4).tolist())
    return ScReport(list(annotations.experts), sc, config.n_trees, n_nodes, seed, per_tree, notes)
