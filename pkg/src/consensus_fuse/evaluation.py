"""Segmentation metrics, paired t-test and the train-on-consensus validation loop."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree
from scipy.special import betainc

from .core import AnnotationSet, Roi, compute_roi
from .errors import ConsensusError, DimensionMismatch
from .features import FeatureContext, feature_matrix
from .forest import ForestConfig, SampleSet, train_supervised
from .fusion import auto_sigma, smoothness_weight
from .graphcut import grid_edges, minimize_binary_mrf

log = logging.getLogger(__name__)

N_RAYS = 180
RAY_STEP = 0.25
LOG_EPS = 1e-5

_FOUR = ndimage.generate_binary_structure(2, 1)


def _pair(a, m) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a) > 0
    m = np.asarray(m) > 0
    if a.shape != m.shape:
        raise DimensionMismatch(f"mask shapes differ: {a.shape} vs {m.shape}")
    return a, m


def dice(a, m) -> float:
    """2|A & M| / (|A| + |M|); two empty masks score 1."""
    a, m = _pair(a, m)
    total = int(a.sum()) + int(m.sum())
    if total == 0:
        return 1.0
    return 2.0 * int((a & m).sum()) / total


def boundary(mask) -> np.ndarray:
    """Pixels of ``mask`` with at least one 4-neighbour outside it (image border counts as outside)."""
    m = np.asarray(mask) > 0
    inner = ndimage.binary_erosion(m, _FOUR, border_value=0)
    return m & ~inner


def hausdorff(a, m) -> float:
    """Symmetric Hausdorff distance between the two boundary pixel sets."""
    a, m = _pair(a, m)
    if not a.any() or not m.any():
        raise ConsensusError("Hausdorff distance of an empty mask", "undefined-hd")
    pa = np.argwhere(boundary(a)).astype(np.float64)
    pm = np.argwhere(boundary(m)).astype(np.float64)
    d_am = cKDTree(pm).query(pa)[0].max()
    d_ma = cKDTree(pa).query(pm)[0].max()
    return float(max(d_am, d_ma))


def _single_component(mask: np.ndarray, name: str) -> None:
    if not mask.any():
        raise ConsensusError(f"{name} is empty", "undefined-metric")
    _, n = ndimage.label(mask, _FOUR)
    if n != 1:
        raise ConsensusError(f"{name} has {n} 4-connected components", "undefined-metric")


def ray_radii(mask: np.ndarray, centre, n_rays: int = N_RAYS, step: float = RAY_STEP) -> np.ndarray:
    """Distance from ``centre`` to the farthest in-mask sample along each ray (nan on a miss)."""
    m = np.asarray(mask) > 0
    h, w = m.shape
    t = np.arange(0.0, math.hypot(h, w) + step, step)
    phi = 2 * np.pi * np.arange(n_rays) / n_rays
    rows = np.rint(centre[0] + np.outer(np.sin(phi), t)).astype(np.int64)
    cols = np.rint(centre[1] + np.outer(np.cos(phi), t)).astype(np.int64)
    ok = (rows >= 0) & (rows < h) & (cols >= 0) & (cols < w)
    inside = np.zeros(rows.shape, dtype=bool)
    inside[ok] = m[rows[ok], cols[ok]]
    any_in = inside.any(axis=1)
    last = t.size - 1 - np.argmax(inside[:, ::-1], axis=1)
    return np.where(any_in, t[last], np.nan)


@dataclass
class RetinaMetrics:
    f: float
    s: float
    b: float
    skipped: int = 0

    def __iter__(self):
        return iter((self.f, self.s, self.b))


def retina_metrics(a, m) -> RetinaMetrics:
    """F score, overlap S and mean radial boundary error B (rays from M's centroid)."""
    a, m = _pair(a, m)
    _single_component(a, "A")
    _single_component(m, "M")
    inter = int((a & m).sum())
    union = int((a | m).sum())
    p = inter / int(a.sum())
    r = inter / int(m.sum())
    f = 0.0 if p + r == 0 else 2 * p * r / (p + r)
    s = inter / union
    centre = np.argwhere(m).mean(axis=0)
    ra = ray_radii(a, centre)
    rm = ray_radii(m, centre)
    ok = np.isfinite(ra) & np.isfinite(rm)
    b = float(np.mean(np.abs(ra[ok] - rm[ok]))) if ok.any() else float("nan")
    return RetinaMetrics(f, s, b, int((~ok).sum()))


@dataclass
class MetricReport:
    dice: float
    hausdorff: float
    f: float
    s: float
    b: float
    dice_defined: bool = True
    hausdorff_defined: bool = True
    retina_defined: bool = True
    rays_skipped: int = 0

    def row(self) -> dict:
        return {"dice": self.dice, "hd": self.hausdorff, "f": self.f, "s": self.s, "b": self.b}


def metric_report(a, m) -> MetricReport:
    """All metrics of ``a`` against reference ``m``; undefined entries are nan and flagged."""
    a, m = _pair(a, m)
    both_empty = not a.any() and not m.any()
    d = dice(a, m)
    try:
        hd, hd_ok = hausdorff(a, m), True
    except ConsensusError:
        hd, hd_ok = float("nan"), False
    try:
        rm = retina_metrics(a, m)
        f, s, b, skipped, ret_ok = rm.f, rm.s, rm.b, rm.skipped, True
    except ConsensusError:
        f = s = b = float("nan")
        skipped, ret_ok = 0, False
    return MetricReport(d, hd, f, s, b, not both_empty, hd_ok, ret_ok, skipped)


METRIC_COLUMNS = ("case_id", "method", "dice", "hd", "f", "s", "b")


def write_metrics_csv(rows: list[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(METRIC_COLUMNS), extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow({k: (f"{v:.10g}" if isinstance(v, float) else v) for k, v in r.items()})


# --------------------------------------------------------------------------
# Paired t-test
# --------------------------------------------------------------------------

@dataclass
class TTest:
    p: float
    t: float
    df: int
    degenerate: bool = False


def t_sf2(t: float, df: int) -> float:
    """Two-sided tail probability P(|T| >= |t|) of Student's t with ``df`` dof."""
    if math.isinf(t):
        return 0.0
    return float(betainc(df / 2.0, 0.5, df / (df + t * t)))


def paired_t_test(x, y) -> TTest:
    """Two-sided paired t-test on x - y.

    If all differences are equal the statistic is undefined: p = 1 when they
    are all zero, p = 0 otherwise; both cases are flagged degenerate.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ConsensusError("paired samples must be 1-D and equally long", "invalid-input")
    n = x.size
    if n < 2:
        raise ConsensusError("need at least 2 pairs", "invalid-input")
    d = x - y
    df = n - 1
    sd = d.std(ddof=1)
    if sd == 0:
        if np.all(d == 0):
            return TTest(1.0, 0.0, df, True)
        return TTest(0.0, math.copysign(math.inf, d.mean()), df, True)
    t = d.mean() / (sd / math.sqrt(n))
    return TTest(min(1.0, t_sf2(t, df)), float(t), df)


# --------------------------------------------------------------------------
# Train-on-consensus validation
# --------------------------------------------------------------------------

@dataclass
class FoldReport:
    fold: int
    test_cases: list[str]
    reports: list[MetricReport] = field(default_factory=list)

    @property
    def mean_dice(self) -> float:
        return float(np.mean([r.dice for r in self.reports])) if self.reports else float("nan")

    def rows(self) -> list[dict]:
        return [{"fold": self.fold, "case_id": c, **r.row()} for c, r in zip(self.test_cases, self.reports)]


def fold_assignment(n: int, folds: int, seed: int) -> list[np.ndarray]:
    """Deterministic shuffled split of range(n) into ``folds`` near-equal parts."""
    if folds < 2 or n < folds:
        raise ConsensusError(f"cannot split {n} cases into {folds} folds", "degenerate-folds")
    perm = np.random.default_rng([seed, 15]).permutation(n)
    return [np.sort(p) for p in np.array_split(perm, folds)]


def probability_segmentation(p1: np.ndarray, image: np.ndarray, roi: Roi, lam: float,
                             sigma: float) -> np.ndarray:
    """Graph cut of -log(Pr + eps) unaries with contrast-sensitive smoothing over the ROI."""
    p1 = np.asarray(p1, dtype=np.float64).reshape(roi.shape)
    D = np.stack([-np.log(1.0 - p1 + LOG_EPS), -np.log(p1 + LOG_EPS)], axis=-1)
    patch = np.asarray(image)[roi.slices]
    e, dist = grid_edges(patch.shape)
    flat = patch.ravel()
    w = lam * smoothness_weight(flat[e[:, 0]], flat[e[:, 1]], dist, sigma)
    labels, _ = minimize_binary_mrf(D, e, w)
    out = np.zeros(np.asarray(image).shape, dtype=np.uint8)
    out[roi.slices] = labels
    return out


def fsl_validate(annotations: AnnotationSet, consensus: list[np.ndarray],
                 contexts: list[FeatureContext] | None = None, folds: int = 5,
                 config: ForestConfig | None = None, lam: float = 0.06, seed: int = 0,
                 rois: list[Roi] | None = None, features: list[np.ndarray] | None = None,
                 n_jobs: int = 1) -> list[FoldReport]:
    """k-fold train-on-consensus validation of one fusion method's output."""
    config = config or ForestConfig()
    n = len(annotations.slices)
    if len(consensus) != n:
        raise ConsensusError("one consensus mask per slice required", "invalid-input")
    if rois is None:
        rois = [compute_roi(s.masks) for s in annotations.slices]
    if features is None:
        if contexts is None:
            raise ConsensusError("need feature contexts or feature matrices", "invalid-input")
        features = [feature_matrix(c, r.pixels(), dtype=np.float32) for c, r in zip(contexts, rois)]
    labels = []
    for c, r in zip(consensus, rois):
        px = r.pixels()
        labels.append(np.asarray(c)[px[:, 0], px[:, 1]].astype(np.int8))

    names = [s.name or f"slice_{k:04d}" for k, s in enumerate(annotations.slices)]
    reports = []
    for f, test in enumerate(fold_assignment(n, folds, seed)):
        train = np.setdiff1d(np.arange(n), test)
        X = np.concatenate([features[k] for k in train])
        y = np.concatenate([labels[k] for k in train])
        forest = train_supervised(SampleSet(X, y), config, seed + f, n_jobs)
        sigma = auto_sigma([annotations.slices[k].image for k in test], [rois[k] for k in test])
        fr = FoldReport(f, [names[k] for k in test])
        for k in test:
            p1 = forest.predict_proba(features[k])[:, 1]
            seg = probability_segmentation(p1, annotations.slices[k].image, rois[k], lam, sigma)
            fr.reports.append(metric_report(seg, consensus[k]))
        log.info("fold %d: mean dice %.4f", f, fr.mean_dice)
        reports.append(fr)
    return reports
