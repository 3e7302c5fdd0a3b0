"""Consensus labelling by graph cut, plus the majority-vote baseline.

Energy per slice, over the ROI with an 8-neighbourhood::

    E(L) = sum_s D_s(L_s) + sum_(s,t) lambda * exp(-(I_s - I_t)^2 / (2 sigma^2)) / |s - t| * [L_s != L_t]

D comes from the experts' labels weighted by their reliability. Pixels outside
the ROI are background.
"""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field

import numpy as np
from joblib import Parallel, delayed

from .consistency import ScReport, self_consistency
from .core import AnnotationSet, Roi, compute_roi
from .errors import ConsensusError
from .features import FeatureContext
from .forest import ForestConfig
from .graphcut import grid_edges, minimize_binary_mrf

log = logging.getLogger(__name__)

SIGMA_FLOOR = 1e-3


@dataclass
class FusionConfig:
    lam: float = 0.06
    sigma: float | str = "auto"
    neighborhood: int = 8
    tie_label: int = 0
    # "reliability": weight = (1 + SC) / 2, so any SC in [0, 1] keeps an
    # expert's vote pointing the right way. "literal": weight = SC.
    sc_mapping: str = "reliability"

    def __post_init__(self):
        if not self.lam > 0:
            raise ConsensusError("lambda must be > 0", "invalid-config")
        if self.sigma != "auto" and not float(self.sigma) > 0:
            raise ConsensusError("sigma must be > 0 or 'auto'", "invalid-config")
        if self.neighborhood not in (4, 8):
            raise ConsensusError("neighborhood must be 4 or 8", "invalid-config")
        if self.tie_label not in (0, 1):
            raise ConsensusError("tie label must be 0 or 1", "invalid-config")
        if self.sc_mapping not in ("reliability", "literal"):
            raise ConsensusError("sc_mapping must be 'reliability' or 'literal'", "invalid-config")

    def to_dict(self) -> dict:
        return asdict(self)


def penalty_costs(labels, sc) -> tuple[float, float]:
    """Average over experts of (D0, D1); an expert voting 1 with score s costs (s, 1 - s)."""
    y = np.asarray(labels).ravel()
    s = np.asarray(sc, dtype=np.float64).ravel()
    if y.size == 0 or y.size != s.size:
        raise ConsensusError("need one score per expert label", "invalid-input")
    if np.any(s < 0) or np.any(s > 1):
        raise ConsensusError("SC scores must lie in [0, 1]", "invalid-sc")
    d1 = np.where(y == 1, 1.0 - s, s)
    d0 = np.where(y == 1, s, 1.0 - s)
    return float(d0.mean()), float(d1.mean())


def penalty_maps(masks: list[np.ndarray], weights: np.ndarray) -> np.ndarray:
    """Vectorised ``penalty_costs`` over stacked masks; returns (..., 2)."""
    Y = np.stack([np.asarray(m) for m in masks]).astype(bool)
    s = np.asarray(weights, dtype=np.float64).reshape((-1,) + (1,) * (Y.ndim - 1))
    if np.any(s < 0) or np.any(s > 1):
        raise ConsensusError("SC scores must lie in [0, 1]", "invalid-sc")
    d1 = np.where(Y, 1.0 - s, s).mean(axis=0)
    return np.stack([1.0 - d1, d1], axis=-1)


def reliability(sc, mapping: str = "reliability") -> np.ndarray:
    sc = np.asarray(sc, dtype=np.float64)
    return (1.0 + sc) / 2.0 if mapping == "reliability" else sc


def smoothness_weight(i_s, i_t, dist, sigma: float):
    """exp(-(i_s - i_t)^2 / (2 sigma^2)) / dist."""
    if not sigma > 0:
        raise ConsensusError("sigma must be > 0", "invalid-config")
    d = np.asarray(i_s, dtype=np.float64) - np.asarray(i_t, dtype=np.float64)
    return np.exp(-d * d / (2.0 * sigma * sigma)) / np.asarray(dist, dtype=np.float64)


def neighbour_differences(image: np.ndarray, roi: Roi, connectivity: int = 8) -> np.ndarray:
    patch = np.asarray(image)[roi.slices]
    e, _ = grid_edges(patch.shape, connectivity)
    flat = patch.ravel()
    return flat[e[:, 0]] - flat[e[:, 1]]


def auto_sigma(images, rois, connectivity: int = 8) -> float:
    """Standard deviation of all neighbour intensity differences in the ROIs."""
    diffs = np.concatenate([neighbour_differences(im, r, connectivity) for im, r in zip(images, rois)])
    return max(float(diffs.std()) if diffs.size else 0.0, SIGMA_FLOOR)


def fuse_slice(image: np.ndarray, masks: list[np.ndarray], weights: np.ndarray, roi: Roi,
               lam: float, sigma: float, connectivity: int = 8) -> tuple[np.ndarray, float]:
    """Consensus for one slice given per-expert weights in [0, 1]; returns (mask, energy)."""
    sl = roi.slices
    D = penalty_maps([np.asarray(m)[sl] for m in masks], weights)
    patch = np.asarray(image)[sl]
    e, dist = grid_edges(patch.shape, connectivity)
    flat = patch.ravel()
    w = lam * smoothness_weight(flat[e[:, 0]], flat[e[:, 1]], dist, sigma)
    labels, energy = minimize_binary_mrf(D, e, w)
    out = np.zeros(np.asarray(image).shape, dtype=np.uint8)
    out[sl] = labels
    return out, energy


@dataclass
class FusionResult:
    consensus: list[np.ndarray]
    sc: ScReport
    energy_per_slice: list[float]
    lam: float
    sigma: float
    rois: list[Roi] = field(default_factory=list)

    @property
    def energy(self) -> float:
        return float(sum(self.energy_per_slice))

    def report(self) -> dict:
        return {
            "lambda": self.lam,
            "sigma": self.sigma,
            "sc": [float(s) for s in self.sc.sc],
            "energy_per_slice": [float(e) for e in self.energy_per_slice],
        }

    def dumps(self) -> str:
        return json.dumps(self.report(), indent=2)


def fuse(annotations: AnnotationSet, contexts: list[FeatureContext] | None = None,
         config: FusionConfig | None = None, forest_config: ForestConfig | None = None,
         seed: int = 0, rois: list[Roi] | None = None, features: list[np.ndarray] | None = None,
         sc: ScReport | None = None, disable_sc: bool = False, allow_missing: bool = False,
         n_jobs: int = 1) -> FusionResult:
    """Graph-cut consensus of every slice.

    SC is scored once for the dataset unless ``sc`` is supplied. With
    ``disable_sc`` every expert gets SC 0.5. With ``allow_missing`` a slice's
    penalties average over its present experts only.
    """
    config = config or FusionConfig()
    flags = annotations.missing_flags()
    if flags.any() and not allow_missing:
        raise ConsensusError("annotation set has missing masks; impute first", "missing-annotations")
    if rois is None:
        rois = [compute_roi(s.masks) for s in annotations.slices]

    R = annotations.n_experts
    if disable_sc:
        sc = ScReport(list(annotations.experts), np.full(R, 0.5), 0, 0, seed)
    elif sc is None:
        sc = self_consistency(annotations, contexts, rois, forest_config, seed,
                              features=features, n_jobs=n_jobs)
    weights = reliability(sc.sc, config.sc_mapping)

    images = [s.image for s in annotations.slices]
    sigma = auto_sigma(images, rois, config.neighborhood) if config.sigma == "auto" else float(config.sigma)

    def one(k):
        s = annotations.slices[k]
        present = [r for r in range(R) if s.masks[r] is not None]
        return fuse_slice(s.image, [s.masks[r] for r in present], weights[present], rois[k],
                          config.lam, sigma, config.neighborhood)

    if n_jobs == 1:
        out = [one(k) for k in range(len(annotations.slices))]
    else:
        out = Parallel(n_jobs=n_jobs, prefer="threads")(delayed(one)(k) for k in range(len(annotations.slices)))
    log.info("fused %d slices, lambda=%g sigma=%.4g", len(out), config.lam, sigma)
    return FusionResult([m for m, _ in out], sc, [e for _, e in out], config.lam, sigma, list(rois))


def majority_vote(annotations: AnnotationSet, tie_label: int = 0) -> list[np.ndarray]:
    """Per-pixel majority of the present masks of each slice."""
    out = []
    for s in annotations.slices:
        present = s.present()
        if not present:
            raise ConsensusError("slice without masks", "all-experts-missing")
        votes = np.sum([np.asarray(m, dtype=np.int64) for m in present], axis=0)
        n = len(present)
        mv = (2 * votes > n).astype(np.uint8)
        if tie_label == 1:
            mv[2 * votes == n] = 1
        out.append(mv)
    return out
