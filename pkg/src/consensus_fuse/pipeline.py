"""Fusion methods wired end to end, with per-slice feature caching."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .consistency import ScReport, self_consistency
from .core import AnnotationSet, Roi, compute_roi
from .errors import ConsensusError
from .features import build_feature_context, feature_matrix
from .forest import ForestConfig, impute_missing
from .fusion import FusionConfig, FusionResult, fuse, majority_vote

log = logging.getLogger(__name__)

METHODS = ("gcme", "gcme-all", "gcme-wssl", "gcme-wsc", "mv")


class FeatureStore:
    """Lazily built feature contexts and ROI feature matrices, keyed by slice."""

    def __init__(self, annotations: AnnotationSet, dtype=np.float32):
        self.images = [s.image for s in annotations.slices]
        self.dtype = dtype
        self._ctx = {}
        self._mat = {}
        self._imputed = {}

    def context(self, k: int):
        if k not in self._ctx:
            self._ctx[k] = build_feature_context(self.images[k])
        return self._ctx[k]

    def matrix(self, k: int, roi: Roi) -> np.ndarray:
        key = (k, roi)
        if key not in self._mat:
            self._mat[key] = feature_matrix(self.context(k), roi.pixels(), dtype=self.dtype)
        return self._mat[key]

    def matrices(self, rois: list[Roi]) -> list[np.ndarray]:
        return [self.matrix(k, r) for k, r in enumerate(rois)]


@dataclass
class MethodResult:
    method: str
    consensus: list[np.ndarray]
    fusion: FusionResult | None = None
    imputed: AnnotationSet | None = None

    @property
    def sc(self) -> ScReport | None:
        return self.fusion.sc if self.fusion is not None else None


def rois_of(annotations: AnnotationSet) -> list[Roi]:
    return [compute_roi(s.masks) for s in annotations.slices]


def impute(annotations: AnnotationSet, forest_config: ForestConfig, seed: int,
           store: FeatureStore, n_jobs: int = 1) -> AnnotationSet:
    # gcme and gcme-wsc share one imputation per (dataset, forest, seed)
    key = (id(annotations), repr(forest_config), seed)
    if key not in store._imputed:
        rois = rois_of(annotations)
        store._imputed[key] = (annotations, impute_missing(
            annotations, rois=rois, config=forest_config, seed=seed,
            features=store.matrices(rois), n_jobs=n_jobs))
    return store._imputed[key][1]


def score(annotations: AnnotationSet, forest_config: ForestConfig, seed: int,
          store: FeatureStore, n_jobs: int = 1) -> ScReport:
    rois = rois_of(annotations)
    return self_consistency(annotations, rois=rois, config=forest_config, seed=seed,
                            features=store.matrices(rois), n_jobs=n_jobs)


def run_method(annotations: AnnotationSet, method: str, fusion_config: FusionConfig | None = None,
               forest_config: ForestConfig | None = None, seed: int = 0,
               store: FeatureStore | None = None, n_jobs: int = 1) -> MethodResult:
    """Consensus masks of every slice under one of ``METHODS``.

    gcme       impute missing masks, score SC, graph-cut fusion
    gcme-all   graph-cut fusion using the withheld sidecar masks instead of imputing
    gcme-wssl  graph-cut fusion over the present masks only
    gcme-wsc   impute, then fuse with every SC fixed at 0.5
    mv         majority vote over the present masks
    """
    if method not in METHODS:
        raise ConsensusError(f"unknown method {method!r}; choose from {', '.join(METHODS)}", "unknown-method")
    fusion_config = fusion_config or FusionConfig()
    forest_config = forest_config or ForestConfig()
    store = store or FeatureStore(annotations)

    if method == "mv":
        return MethodResult(method, majority_vote(annotations, fusion_config.tie_label))

    imputed = None
    allow_missing = False
    if method in ("gcme", "gcme-wsc"):
        imputed = impute(annotations, forest_config, seed, store, n_jobs)
        work = imputed
    elif method == "gcme-all":
        work = annotations.restored()
        if work.missing_flags().any():
            raise ConsensusError("gcme-all needs a withheld sidecar for every missing mask", "missing-annotations")
    else:
        work = annotations
        allow_missing = True

    rois = rois_of(work)
    result = fuse(work, config=fusion_config, forest_config=forest_config, seed=seed, rois=rois,
                  features=None if method == "gcme-wsc" else store.matrices(rois),
                  disable_sc=method == "gcme-wsc", allow_missing=allow_missing, n_jobs=n_jobs)
    return MethodResult(method, result.consensus, result, imputed)
