"""Synthetic images with known ground truth and simulated expert annotations.

An image holds one object (square, rectangle, circle or polygon) whose pixels
are Normal(mu_fg, sigma) on a Normal(mu_bg, sigma) background. An expert copy
of the object boundary is made by pushing a few runs of adjacent contour
points along the outward normal and filling the displaced contour.
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter1d
from shapely.geometry import Polygon
from skimage.draw import line as draw_line
from skimage.draw import polygon as draw_polygon

from .core import DatasetManifest, SliceEntry, write_image, write_mask
from .errors import ConsensusError

log = logging.getLogger(__name__)

SHAPES = ("square", "rectangle", "circle", "polygon")
MAX_RETRIES = 10


@dataclass
class SynthSpec:
    size: int = 128
    shape: str | None = None           # None draws one of SHAPES per case
    fg_mean: tuple[float, float] = (0.6, 0.8)
    bg_mean: tuple[float, float] = (0.1, 0.3)
    sigma: float = 0.1
    n_experts: int = 3
    displacement: tuple[float, float] = (10.0, 20.0)
    run_length: int = 15
    runs: int | None = None            # None: 2 if perimeter < 200 px else 3
    extent: tuple[float, float] = (0.35, 0.55)   # object size as a fraction of the image side

    def __post_init__(self):
        self.fg_mean = tuple(self.fg_mean)
        self.bg_mean = tuple(self.bg_mean)
        self.displacement = tuple(self.displacement)
        self.extent = tuple(self.extent)
        lo_f, hi_f = self.fg_mean
        lo_b, hi_b = self.bg_mean
        if not (lo_f <= hi_f and lo_b <= hi_b) or max(lo_b, lo_f) <= min(hi_b, hi_f):
            raise ConsensusError("foreground and background mean ranges must be disjoint", "invalid-spec")
        if self.displacement[0] < 0 or self.displacement[1] < self.displacement[0]:
            raise ConsensusError("displacement range must be non-negative and ordered", "invalid-spec")
        if self.shape is not None and self.shape not in SHAPES:
            raise ConsensusError(f"unknown shape {self.shape!r}", "invalid-spec")
        if self.sigma < 0 or self.n_experts < 1 or self.run_length < 1 or self.size < 8:
            raise ConsensusError("invalid synthetic spec", "invalid-spec")

    def to_dict(self) -> dict:
        return asdict(self)


# --------------------------------------------------------------------------
# Shapes and images
# --------------------------------------------------------------------------

def _shape_mask(shape: str, size: int, spec: SynthSpec, rng: np.random.Generator) -> np.ndarray:
    margin = int(math.ceil(spec.displacement[1])) + 3
    # shrink the extent range on small images so the object still fits inside the margin
    room = (size - 1 - 2 * margin) / size
    if room * size < 4:
        raise ConsensusError(f"{shape} does not fit in a {size}x{size} image", "region-too-large")
    hi = min(spec.extent[1], room)
    lo = min(spec.extent[0], hi)
    mask = np.zeros((size, size), dtype=np.uint8)

    def centre(half_h, half_w):
        rmin, rmax = margin + half_h, size - 1 - margin - half_h
        cmin, cmax = margin + half_w, size - 1 - margin - half_w
        if rmin > rmax or cmin > cmax:
            raise ConsensusError(f"{shape} does not fit in a {size}x{size} image", "region-too-large")
        return rng.uniform(rmin, rmax), rng.uniform(cmin, cmax)

    if shape in ("square", "rectangle"):
        h = int(round(rng.uniform(lo, hi) * size))
        w = h if shape == "square" else int(round(rng.uniform(lo, hi) * size))
        if shape == "rectangle":
            while abs(w - h) < 4 and hi - lo > 0.05:
                w = int(round(rng.uniform(lo, hi) * size))
        r0, c0 = centre(h / 2, w / 2)
        r0, c0 = int(round(r0 - h / 2)), int(round(c0 - w / 2))
        mask[r0:r0 + h, c0:c0 + w] = 1
    elif shape == "circle":
        rad = rng.uniform(lo, hi) * size / 2
        cr, cc = centre(rad, rad)
        rr, cc_ = np.mgrid[:size, :size]
        mask[(rr - cr) ** 2 + (cc_ - cc) ** 2 <= rad * rad] = 1
    else:
        n = int(rng.integers(5, 9))
        # keep vertices spread so the polygon stays fat
        ang = (np.arange(n) + rng.uniform(-0.3, 0.3, n)) * 2 * np.pi / n
        rad = rng.uniform(lo, hi) * size / 2 * rng.uniform(0.8, 1.0, n)
        R = rad.max()
        cr, cc = centre(R, R)
        rr, ccs = draw_polygon(cr + rad * np.sin(ang), cc + rad * np.cos(ang), (size, size))
        mask[rr, ccs] = 1
    if not mask.any():
        raise ConsensusError("empty synthetic region", "region-too-large")
    return mask


def generate_image(spec: SynthSpec, rng: np.random.Generator, shape: str | None = None):
    """(image in [0, 1], ground-truth mask) for one synthetic case."""
    shape = shape or spec.shape or SHAPES[int(rng.integers(len(SHAPES)))]
    size = spec.size
    mask = _shape_mask(shape, size, spec, rng)
    mu_fg = rng.uniform(*spec.fg_mean)
    mu_bg = rng.uniform(*spec.bg_mean)
    noise = rng.standard_normal((size, size)) * spec.sigma
    image = np.where(mask == 1, mu_fg, mu_bg) + noise
    return np.clip(image, 0.0, 1.0), mask


# --------------------------------------------------------------------------
# Contours
# --------------------------------------------------------------------------

# Moore neighbourhood in clockwise order (row grows downward), starting west
_MOORE = ((0, -1), (-1, -1), (-1, 0), (-1, 1), (0, 1), (1, 1), (1, 0), (1, -1))


def trace_boundary(mask: np.ndarray) -> np.ndarray:
    """Ordered (row, col) outer boundary of the first region in raster order.

    Moore-neighbour tracing; the contour runs clockwise as displayed (row
    axis pointing down) and is not closed (last point differs from the first).
    """
    m = np.pad(np.asarray(mask) > 0, 1)
    fg = np.argwhere(m)
    if len(fg) == 0:
        raise ConsensusError("empty mask has no boundary", "empty-mask")
    start = tuple(fg[0])
    if not any(m[start[0] + dr, start[1] + dc] for dr, dc in _MOORE):
        return np.array([[start[0] - 1, start[1] - 1]])
    # we entered start from the west (that pixel is background)
    contour = [start]
    cur = start
    back = 0
    first_move = None
    while True:
        for k in range(8):
            d = (back + 1 + k) % 8
            nr, nc = cur[0] + _MOORE[d][0], cur[1] + _MOORE[d][1]
            if m[nr, nc]:
                break
        nxt = (nr, nc)
        # backtrack direction: the background cell examined just before nxt, seen from nxt
        prev = (back + k) % 8
        pr, pc = cur[0] + _MOORE[prev][0], cur[1] + _MOORE[prev][1]
        back = _MOORE.index((pr - nr, pc - nc)) if (pr - nr, pc - nc) in _MOORE else 0
        move = (cur, nxt)
        if first_move is None:
            first_move = move
        elif move == first_move:
            break
        contour.append(nxt)
        cur = nxt
    pts = np.array(contour[:-1]) - 1
    return pts


def outward_normals(contour: np.ndarray, mask: np.ndarray, k: int = 4, smooth: float = 3.0) -> np.ndarray:
    """Unit normals pointing out of ``mask`` at each contour point.

    Tangents are central differences over +-k points, smoothed along the
    contour so that pixel staircases do not make neighbouring normals cross.
    """
    n = len(contour)
    p = contour.astype(np.float64)
    k = max(1, min(k, (n - 1) // 2))
    t = p[(np.arange(n) + k) % n] - p[(np.arange(n) - k) % n]
    if smooth > 0 and n > 4:
        t = gaussian_filter1d(t, smooth, axis=0, mode="wrap")
    nrm = np.column_stack([t[:, 1], -t[:, 0]])
    length = np.linalg.norm(nrm, axis=1, keepdims=True)
    nrm = nrm / np.where(length > 0, length, 1.0)
    # pick the global sign that sends probes outside the region
    probe = np.rint(p + 3 * nrm).astype(np.int64)
    h, w = mask.shape
    inside = np.zeros(n, dtype=bool)
    ok = (probe[:, 0] >= 0) & (probe[:, 0] < h) & (probe[:, 1] >= 0) & (probe[:, 1] < w)
    inside[ok] = np.asarray(mask)[probe[ok, 0], probe[ok, 1]] > 0
    if inside.mean() > 0.5:
        nrm = -nrm
    return nrm


def rasterize_contour(points: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    """Fill a closed polygon given by (row, col) vertices, outline included."""
    pts = np.asarray(points, dtype=np.float64)
    out = np.zeros(shape, dtype=np.uint8)
    rr, cc = draw_polygon(pts[:, 0], pts[:, 1], shape)
    out[rr, cc] = 1
    q = np.rint(pts).astype(np.int64)
    for a, b in zip(q, np.roll(q, -1, axis=0)):
        rr, cc = draw_line(a[0], a[1], b[0], b[1])
        ok = (rr >= 0) & (rr < shape[0]) & (cc >= 0) & (cc < shape[1])
        out[rr[ok], cc[ok]] = 1
    return out


def _pick_runs(n_points: int, n_runs: int, length: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Disjoint, non-touching runs of ``length`` adjacent contour indices."""
    if n_runs * (length + 1) > n_points:
        n_runs = max(1, n_points // (length + 1))
        length = min(length, n_points)
    for _ in range(1000):
        starts = np.sort(rng.integers(0, n_points, n_runs))
        gaps = np.diff(np.r_[starts, starts[0] + n_points])
        if np.all(gaps > length):
            return [(s + np.arange(length)) % n_points for s in starts]
    # fall back to evenly spread runs
    base = int(rng.integers(n_points))
    return [(base + i * (n_points // n_runs) + np.arange(length)) % n_points for i in range(n_runs)]


def simulate_expert(gt: np.ndarray, spec: SynthSpec, rng: np.random.Generator) -> np.ndarray:
    """One imperfect annotation of ``gt``."""
    gt = np.asarray(gt)
    contour = trace_boundary(gt)
    if len(contour) < 3:
        raise ConsensusError("ground truth too small to perturb", "empty-mask")
    normals = outward_normals(contour, gt)
    n_runs = spec.runs if spec.runs is not None else (2 if len(contour) < 200 else 3)
    lo, hi = spec.displacement
    for _ in range(MAX_RETRIES):
        pts = contour.astype(np.float64).copy()
        for run in _pick_runs(len(contour), n_runs, spec.run_length, rng):
            mag = rng.uniform(lo, hi) * (1 if rng.random() < 0.5 else -1)
            pts[run] += mag * normals[run]
        if hi > 0 and not Polygon(pts[:, ::-1]).is_valid:
            continue
        out = rasterize_contour(pts, gt.shape)
        if out.any():
            return out
    raise ConsensusError("displaced contour kept self-intersecting", "synth-failed")


# --------------------------------------------------------------------------
# Benchmark
# --------------------------------------------------------------------------

@dataclass
class SynthCase:
    image: np.ndarray
    gt: np.ndarray
    experts: list[np.ndarray]
    shape: str


def generate_case(spec: SynthSpec, seed_seq: np.random.SeedSequence) -> SynthCase:
    img_seq, *expert_seqs = seed_seq.spawn(1 + spec.n_experts)
    rng = np.random.default_rng(img_seq)
    shape = spec.shape or SHAPES[int(rng.integers(len(SHAPES)))]
    image, gt = generate_image(spec, rng, shape)
    experts = [simulate_expert(gt, spec, np.random.default_rng(s)) for s in expert_seqs]
    return SynthCase(image, gt, experts, shape)


def generate_benchmark(n: int, spec: SynthSpec, missing_fraction: float, seed: int,
                       out_dir, dataset: str = "synthetic") -> DatasetManifest:
    """Write ``n`` cases under ``out_dir`` and return the manifest (also saved as manifest.json)."""
    if n < 1:
        raise ConsensusError("need at least one case", "invalid-spec")
    if not 0 <= missing_fraction < 1:
        raise ConsensusError("missing fraction must lie in [0, 1)", "invalid-spec")
    if seed < 0:
        raise ConsensusError("seed must be non-negative", "invalid-config")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    root = np.random.SeedSequence(seed)
    case_seqs = root.spawn(n)
    drop_rng = np.random.default_rng(root.spawn(1)[0])
    experts = [f"expert_{k + 1}" for k in range(spec.n_experts)]
    entries = []
    for i, seq in enumerate(case_seqs):
        case = generate_case(spec, seq)
        name = f"case_{i:04d}"
        cdir = out / name
        cdir.mkdir(exist_ok=True)
        write_image(case.image, cdir / "image.pgm")
        write_mask(case.gt, cdir / "gt.pgm")
        drop = -1
        if drop_rng.random() < missing_fraction:
            drop = int(drop_rng.integers(spec.n_experts))
        masks, withheld = [], {}
        for k, m in enumerate(case.experts):
            if k == drop:
                write_mask(m, cdir / f"withheld_{k + 1}.pgm")
                withheld[k] = f"{name}/withheld_{k + 1}.pgm"
                masks.append(None)
            else:
                write_mask(m, cdir / f"expert_{k + 1}.pgm")
                masks.append(f"{name}/expert_{k + 1}.pgm")
        entries.append(SliceEntry(f"{name}/image.pgm", masks, name, f"{name}/gt.pgm", withheld))
    manifest = DatasetManifest(dataset, int(seed), experts, entries)
    manifest.save(out / "manifest.json")
    log.info("wrote %d cases to %s", n, out)
    return manifest
