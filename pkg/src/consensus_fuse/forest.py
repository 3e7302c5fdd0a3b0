"""Random forests grown from scratch: supervised, single-shot semi-supervised,
and a multi-expert probe variant used for self-consistency scoring.

Trees are stored as flat node arrays. Node ids follow the order in which nodes
are created (depth-first, left child first), and each node draws its candidate
features from a generator keyed on ``(tree seed, heap position)`` so that two
trees grown on the same data visit the same candidates along the same paths,
whatever the objective.
"""
from __future__ import annotations

import json
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np
from joblib import Parallel, delayed

from . import _kernels
from .errors import ConsensusError

log = logging.getLogger(__name__)

FOREST_FORMAT = "consensus-fuse/forest"
FOREST_VERSION = 1
UNLABELED = -1
RIDGE = 1e-6
_EPS_GAIN = 1e-12


@dataclass
class ForestConfig:
    n_trees: int = 50
    max_depth: int = 20
    min_samples: int = 5
    n_candidates: int = 14
    n_thresholds: int = 10
    alpha: float = 1.0
    bagging: float = 1.0
    # Cap on bootstrap rows per tree; None keeps round(bagging * n).
    max_samples: int | None = None

    def __post_init__(self):
        for name in ("n_trees", "max_depth", "min_samples", "n_candidates", "n_thresholds"):
            if getattr(self, name) < 1:
                raise ConsensusError(f"{name} must be >= 1", "invalid-config")
        if self.alpha < 0:
            raise ConsensusError("alpha must be >= 0", "invalid-config")
        if not 0 < self.bagging <= 1:
            raise ConsensusError("bagging fraction must lie in (0, 1]", "invalid-config")
        if self.max_samples is not None and self.max_samples < 1:
            raise ConsensusError("max_samples must be >= 1", "invalid-config")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class SampleSet:
    """Training rows that share a pool of feature vectors.

    ``features`` holds one vector per distinct pixel; ``index[i]`` points row i
    at its vector, so a pixel labelled by several experts appears as several
    rows without copying its features. ``labels`` uses -1 for unlabeled rows.
    """

    features: np.ndarray
    labels: np.ndarray
    index: np.ndarray | None = None
    provenance: np.ndarray | None = None

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int8)
        if self.index is None:
            self.index = np.arange(len(self.labels))
        self.index = np.asarray(self.index, dtype=np.int64)
        if len(self.index) != len(self.labels):
            raise ConsensusError("index and labels differ in length", "invalid-samples")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def labeled(self) -> np.ndarray:
        return self.labels != UNLABELED

    def rows(self, which: np.ndarray) -> np.ndarray:
        return self.features[self.index[which]]


# --------------------------------------------------------------------------
# Split scores
# --------------------------------------------------------------------------

def _entropy2(n1, n):
    """Binary entropy (bits) of n1 positives among n, 0 where n == 0."""
    n1 = np.asarray(n1, dtype=np.float64)
    n = np.asarray(n, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        p = np.where(n > 0, n1 / np.where(n > 0, n, 1), 0.0)
        q = 1.0 - p
        h = -(np.where(p > 0, p * np.log2(np.where(p > 0, p, 1)), 0.0)
              + np.where(q > 0, q * np.log2(np.where(q > 0, q, 1)), 0.0))
    return h


def _gain_from_counts(n, n1, nl, nl1):
    """Vectorised information gain from parent and left-child label counts."""
    n = np.asarray(n, dtype=np.float64)
    nr, nr1 = n - nl, n1 - nl1
    with np.errstate(divide="ignore", invalid="ignore"):
        wl = np.where(n > 0, nl / np.where(n > 0, n, 1), 0.0)
        wr = np.where(n > 0, nr / np.where(n > 0, n, 1), 0.0)
    g = _entropy2(n1, n) - wl * _entropy2(nl1, nl) - wr * _entropy2(nr1, nr)
    return np.maximum(g, 0.0)


def info_gain(parent, left, right) -> float:
    """Information gain (bits) of splitting binary labels ``parent`` into ``left``/``right``."""
    parent, left, right = (np.asarray(a).ravel() for a in (parent, left, right))
    if parent.size == 0:
        raise ConsensusError("information gain of an empty set", "empty-node")
    if left.size + right.size != parent.size or left.sum() + right.sum() != parent.sum():
        raise ConsensusError("children do not partition the parent", "invalid-split")
    return float(_gain_from_counts(parent.size, parent.sum(), left.size, left.sum()))


def _log_var(s1, s2, cnt, dim_rows=2):
    """log(variance + ridge) from running sums; tiny children use the ridge alone."""
    cnt = np.asarray(cnt, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        safe = np.where(cnt > 0, cnt, 1.0)
        mean = s1 / safe
        var = np.maximum(s2 / safe - mean * mean, 0.0)
    var = np.where(cnt >= dim_rows, var, 0.0)
    return np.log(var + RIDGE)


def unlabeled_gain(parent, left, right, subspace=None) -> float:
    """Differential-entropy gain of a split under a Gaussian model.

    ``log|C(parent)| - sum_i |child_i|/|parent| log|C(child_i)|`` with covariances
    taken over ``subspace`` plus a 1e-6 ridge. Children with fewer than
    ``dim + 1`` rows are assigned the ridge covariance.
    """
    def as_rows(a):
        a = np.asarray(a, dtype=np.float64)
        return a[:, None] if a.ndim == 1 else a

    parent, left, right = as_rows(parent), as_rows(left), as_rows(right)
    if subspace is not None:
        parent, left, right = parent[:, subspace], left[:, subspace], right[:, subspace]
    if parent.shape[0] < 2:
        raise ConsensusError("need at least 2 parent rows", "empty-node")
    dim = parent.shape[1]
    if dim == 0:
        raise ConsensusError("empty subspace", "invalid-split")

    def logdet(a):
        if a.shape[0] < dim + 1:
            return dim * math.log(RIDGE)
        cov = np.atleast_2d(np.cov(a, rowvar=False, bias=True)) + RIDGE * np.eye(dim)
        return float(np.linalg.slogdet(cov)[1])

    n = parent.shape[0]
    out = logdet(parent)
    for child in (left, right):
        if child.shape[0]:
            out -= child.shape[0] / n * logdet(child)
    return out


def _quantile_thresholds(Xf: np.ndarray, n_thresholds: int) -> np.ndarray:
    """(F, T) thresholds at interior uniform quantiles of each column."""
    s = np.sort(Xf.T, axis=1)
    n = s.shape[1]
    pos = np.arange(1, n_thresholds + 1) / (n_thresholds + 1) * (n - 1)
    lo = np.floor(pos).astype(np.int64)
    hi = np.minimum(lo + 1, n - 1)
    frac = pos - lo
    return s[:, lo] * (1 - frac) + s[:, hi] * frac


# --------------------------------------------------------------------------
# Trees
# --------------------------------------------------------------------------

@dataclass
class Tree:
    feature: np.ndarray        # -1 marks a leaf
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    parent: np.ndarray
    depth: np.ndarray
    n_samples: np.ndarray
    hist: np.ndarray           # (m, 2) class histogram of labeled rows
    gains: np.ndarray | None = None    # (m, R) per-expert mean gain at split nodes

    @property
    def n_nodes(self) -> int:
        return len(self.feature)

    @property
    def split_nodes(self) -> np.ndarray:
        return np.flatnonzero(self.feature >= 0)

    def apply(self, X: np.ndarray) -> np.ndarray:
        """Leaf id reached by every row of ``X``."""
        node = np.zeros(len(X), dtype=np.int64)
        rows = np.arange(len(X))
        active = self.feature[node] >= 0
        while active.any():
            idx = rows[active]
            nd = node[idx]
            go_left = X[idx, self.feature[nd]] <= self.threshold[nd]
            node[idx] = np.where(go_left, self.left[nd], self.right[nd])
            active[idx] = self.feature[node[idx]] >= 0
        return node

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        h = self.hist[self.apply(X)]
        return h / h.sum(axis=1, keepdims=True)

    def to_node(self, i: int = 0) -> dict:
        """Nested-dict view of the subtree rooted at ``i``."""
        if self.feature[i] < 0:
            return {"n_samples": int(self.n_samples[i]), "leaf": [float(v) for v in self.hist[i]]}
        d = {
            "n_samples": int(self.n_samples[i]),
            "feature": int(self.feature[i]),
            "threshold": float(self.threshold[i]),
            "hist": [float(v) for v in self.hist[i]],
        }
        if self.gains is not None:
            d["gains"] = [float(v) for v in self.gains[i]]
        d["left"] = self.to_node(int(self.left[i]))
        d["right"] = self.to_node(int(self.right[i]))
        return d

    @classmethod
    def from_node(cls, root: dict) -> Tree:
        cols: dict[str, list] = {k: [] for k in
                                 ("feature", "threshold", "left", "right", "parent", "depth",
                                  "n_samples", "hist", "gains")}
        has_gains = "gains" in root
        stack = [(root, -1, 0, None, None)]
        while stack:
            node, parent, depth, parent_id, side = stack.pop()
            i = len(cols["feature"])
            if parent_id is not None:
                cols[side][parent_id] = i
            leaf = "leaf" in node
            cols["feature"].append(-1 if leaf else node["feature"])
            cols["threshold"].append(0.0 if leaf else node["threshold"])
            cols["left"].append(-1)
            cols["right"].append(-1)
            cols["parent"].append(parent)
            cols["depth"].append(depth)
            cols["n_samples"].append(node["n_samples"])
            cols["hist"].append(node["leaf"] if leaf else node["hist"])
            cols["gains"].append(node.get("gains") if not leaf else None)
            if not leaf:
                stack.append((node["right"], i, depth + 1, i, "right"))
                stack.append((node["left"], i, depth + 1, i, "left"))
        gains = None
        if has_gains:
            r = len(root["gains"])
            gains = np.array([g if g is not None else [np.nan] * r for g in cols["gains"]])
        return cls(
            feature=np.array(cols["feature"], dtype=np.int64),
            threshold=np.array(cols["threshold"], dtype=np.float64),
            left=np.array(cols["left"], dtype=np.int64),
            right=np.array(cols["right"], dtype=np.int64),
            parent=np.array(cols["parent"], dtype=np.int64),
            depth=np.array(cols["depth"], dtype=np.int64),
            n_samples=np.array(cols["n_samples"], dtype=np.int64),
            hist=np.array(cols["hist"], dtype=np.float64).reshape(-1, 2),
            gains=gains,
        )


def _bootstrap(n: int, config: ForestConfig, seed: int, tree: int) -> np.ndarray:
    m = max(1, int(round(config.bagging * n)))
    if config.max_samples is not None:
        m = min(m, config.max_samples)
    rng = np.random.default_rng([seed, tree, 0])
    return np.sort(rng.integers(0, n, size=m))


def _grow(X, index, labels, rows, weights, mode, alpha, config: ForestConfig, seed: int,
          tree: int) -> Tree:
    out = _kernels.grow_tree(
        X, index, rows, labels, weights, mode, float(alpha), config.max_depth,
        config.min_samples, min(config.n_candidates, X.shape[1]), config.n_thresholds,
        seed, tree,
    )
    feature, threshold, left, right, parent, depth, n_samples, hist, gains = out
    return Tree(feature, threshold, left, right, parent, depth, n_samples, hist,
                gains if mode == _kernels.PROBE else None)


# --------------------------------------------------------------------------
# Forests
# --------------------------------------------------------------------------

@dataclass
class Forest:
    trees: list[Tree]
    config: ForestConfig
    seed: int
    n_features: int
    kind: str = "supervised"
    meta: dict = field(default_factory=dict)

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        """Mean of per-tree leaf posteriors, shape (n, 2)."""
        X = np.atleast_2d(X)
        p = np.zeros((len(X), 2))
        for t in self.trees:
            p += t.predict_proba(X)
        p /= len(self.trees)
        p[:, 0] = 1.0 - p[:, 1]
        return p

    def to_json(self) -> dict:
        return {
            "format": FOREST_FORMAT,
            "version": FOREST_VERSION,
            "kind": self.kind,
            "seed": self.seed,
            "n_features": self.n_features,
            "config": self.config.to_dict(),
            "meta": self.meta,
            "trees": [t.to_node() for t in self.trees],
        }

    def dumps(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_json(cls, doc: dict) -> Forest:
        if doc.get("format") != FOREST_FORMAT or doc.get("version") != FOREST_VERSION:
            raise ConsensusError("unsupported forest document", "forest-format")
        return cls(
            trees=[Tree.from_node(t) for t in doc["trees"]],
            config=ForestConfig(**doc["config"]),
            seed=int(doc["seed"]),
            n_features=int(doc["n_features"]),
            kind=doc.get("kind", "supervised"),
            meta=doc.get("meta", {}),
        )

    @classmethod
    def loads(cls, text: str) -> Forest:
        return cls.from_json(json.loads(text))


def _seed(seed: int) -> int:
    if seed < 0:
        raise ConsensusError("seed must be non-negative", "invalid-config")
    return int(seed)


def predict(forest: Forest, features: np.ndarray) -> np.ndarray:
    """Class posterior (p0, p1) for one vector, or (n, 2) for a matrix."""
    x = np.asarray(features)
    p = forest.predict_proba(np.atleast_2d(x))
    return p[0] if x.ndim == 1 else p


def _fit(X, index, labels, weights, mode, alpha, config, seed, n_jobs) -> list[Tree]:
    labels = np.ascontiguousarray(labels, dtype=np.int8).reshape(len(index), -1)
    weights = np.ascontiguousarray(weights, dtype=np.float64)

    def one(t):
        rows = _bootstrap(len(index), config, seed, t)
        return _grow(X, index, labels, rows, weights, mode, alpha, config, seed, t)

    if n_jobs == 1 or config.n_trees == 1:
        return [one(t) for t in range(config.n_trees)]
    # the kernel releases the GIL, so threads share X without copies
    return Parallel(n_jobs=n_jobs, prefer="threads")(delayed(one)(t) for t in range(config.n_trees))


def train_supervised(samples: SampleSet, config: ForestConfig | None = None, seed: int = 0,
                     n_jobs: int = 1) -> Forest:
    config = config or ForestConfig()
    y = samples.labels
    lab = y[y != UNLABELED]
    if lab.size < config.min_samples:
        raise ConsensusError(f"{lab.size} labeled rows, need {config.min_samples}", "too-few-samples")
    if np.unique(lab).size < 2:
        raise ConsensusError("training labels contain a single class", "degenerate-labels")
    keep = np.flatnonzero(y != UNLABELED)
    sub = SampleSet(samples.features, y[keep], samples.index[keep])
    trees = _fit(sub.features, sub.index, sub.labels, np.ones(1), _kernels.SUPERVISED, 0.0,
                 config, _seed(seed), n_jobs)
    return Forest(trees, config, seed, samples.features.shape[1], "supervised")


def train_ssl(samples: SampleSet, config: ForestConfig | None = None, seed: int = 0,
              n_jobs: int = 1) -> Forest:
    """Single-shot semi-supervised forest (differential-entropy + alpha * labeled gain)."""
    config = config or ForestConfig()
    y = samples.labels
    lab = y[y != UNLABELED]
    if not (np.any(lab == 0) and np.any(lab == 1)):
        raise ConsensusError("need labeled rows of both classes", "degenerate-labels")
    if lab.size == y.size:
        warnings.warn("no unlabeled rows; training a supervised forest instead", stacklevel=2)
        return train_supervised(samples, config, seed, n_jobs)
    trees = _fit(samples.features, samples.index, y, np.ones(1), _kernels.SSL, config.alpha,
                 config, _seed(seed), n_jobs)
    return Forest(trees, config, seed, samples.features.shape[1], "ssl")


def train_probe(features: np.ndarray, labels: np.ndarray, config: ForestConfig | None = None,
                seed: int = 0, weights: np.ndarray | None = None, n_jobs: int = 1) -> Forest:
    """Forest whose splits maximise the weighted mean per-expert gain.

    ``labels`` is (n, R) with -1 for unknown; every split node stores each
    expert's mean gain over that node's whole candidate set.
    """
    config = config or ForestConfig()
    labels = np.asarray(labels, dtype=np.int8)
    r = labels.shape[1]
    w = np.ones(r) if weights is None else np.asarray(weights, dtype=np.float64)
    if w.shape != (r,) or np.any(w < 0) or w.sum() <= 0:
        raise ConsensusError("expert weights must be non-negative with positive sum", "invalid-config")
    index = np.arange(len(labels))
    trees = _fit(features, index, labels, w / w.sum(), _kernels.PROBE, 0.0,
                 config, _seed(seed), n_jobs)
    return Forest(trees, config, seed, features.shape[1], "probe", {"n_experts": r})


def oob_predict(forest: Forest, samples: SampleSet) -> tuple[np.ndarray, np.ndarray]:
    """Out-of-bag posteriors for the labeled rows used to train ``forest``.

    Returns (p1, counted) where ``counted`` flags rows that were out of bag for
    at least one tree. Bootstraps are regenerated from the forest seed.
    """
    keep = np.flatnonzero(samples.labels != UNLABELED) if forest.kind == "supervised" \
        else np.arange(len(samples))
    n = len(keep)
    X = samples.features[samples.index[keep]]
    total = np.zeros(n)
    votes = np.zeros(n)
    for t, tree in enumerate(forest.trees):
        inbag = np.zeros(n, dtype=bool)
        inbag[_bootstrap(n, forest.config, forest.seed, t)] = True
        out = ~inbag
        if out.any():
            total[out] += tree.predict_proba(X[out])[:, 1]
            votes[out] += 1
    with np.errstate(invalid="ignore"):
        p1 = np.where(votes > 0, total / np.maximum(votes, 1), np.nan)
    full = np.full(len(samples), np.nan)
    full[keep] = p1
    counted = np.zeros(len(samples), dtype=bool)
    counted[keep] = votes > 0
    return full, counted


# --------------------------------------------------------------------------
# Imputation
# --------------------------------------------------------------------------

def imputation_samples(annotations, features: list[np.ndarray], rois) -> SampleSet:
    """Pooled rows over all slices: one labeled row per (ROI pixel, present expert)
    and one unlabeled row per (ROI pixel, missing expert). Features are shared
    through the row index."""
    offsets = np.cumsum([0] + [len(X) for X in features])
    index, labels, prov = [], [], []
    for k, (s, roi) in enumerate(zip(annotations.slices, rois)):
        px = roi.pixels()
        rows = offsets[k] + np.arange(len(px))
        for r, m in enumerate(s.masks):
            index.append(rows)
            if m is None:
                labels.append(np.full(len(px), UNLABELED, np.int8))
            else:
                labels.append(np.asarray(m)[px[:, 0], px[:, 1]].astype(np.int8))
            prov.append(np.column_stack([np.full(len(px), k), px, np.full(len(px), r)]))
    return SampleSet(np.concatenate(features), np.concatenate(labels), np.concatenate(index),
                     np.concatenate(prov))


def impute_missing(annotations, contexts=None, rois=None, config: ForestConfig | None = None,
                   seed: int = 0, features: list[np.ndarray] | None = None, n_jobs: int = 1):
    """Fill every missing mask from one semi-supervised forest over all slices.

    Missing pixels inside the slice ROI take the argmax posterior (ties -> 0);
    pixels outside the ROI are 0. Present masks are returned untouched.
    """
    from .core import compute_roi
    from .features import feature_matrix

    flags = annotations.missing_flags()
    if not flags.any():
        return annotations
    for r, name in enumerate(annotations.experts):
        if flags[:, r].all():
            raise ConsensusError(f"expert {name} has no annotations to learn from", "unimputable-expert")
    config = config or ForestConfig()
    if rois is None:
        rois = [compute_roi(s.masks) for s in annotations.slices]
    if features is None:
        if contexts is None:
            raise ConsensusError("need feature contexts or feature matrices", "invalid-input")
        features = [feature_matrix(c, r.pixels(), dtype=np.float32) for c, r in zip(contexts, rois)]
    samples = imputation_samples(annotations, features, rois)
    forest = train_ssl(samples, config, seed, n_jobs)

    masks = []
    for k, s in enumerate(annotations.slices):
        if not any(m is None for m in s.masks):
            masks.append(list(s.masks))
            continue
        p1 = forest.predict_proba(features[k])[:, 1]
        filled = np.zeros(s.image.shape, dtype=np.uint8)
        px = rois[k].pixels()
        filled[px[:, 0], px[:, 1]] = (p1 > 0.5).astype(np.uint8)
        filled.setflags(write=False)
        masks.append([filled if m is None else m for m in s.masks])
    log.info("imputed %d masks", int(flags.sum()))
    return annotations.with_masks(masks)
