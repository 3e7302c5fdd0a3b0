"""Per-pixel 181-dimensional descriptors.

Layout of a feature vector::

    [0:4)     mean, variance, skewness, kurtosis of the 31x31 patch
    [4:76)    texture entropy, 8 Gabor maps x 9 sectors (orientation-major, then scale)
    [76:85)   curvature entropy, 9 sectors
    [85:181)  context: 8 rays x 4 radii x (intensity, texture, curvature) 3x3 means

All neighbourhood lookups use mirror padding (``d c b | a b c d | c b a``).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import fft as sfft
from scipy import ndimage

PATCH = 31
HALF = PATCH // 2
N_SECTORS = 9
N_BINS = 16
ORIENTATIONS = (0.0, 45.0, 90.0, 135.0)
SCALES = (0.5, 1.0)
CONTEXT_RADII = (3, 8, 15, 22)
CONTEXT_RAYS = 8
N_FEATURES = 181

# texture map used for context samples: 90 degrees, scale 1
CONTEXT_TEXTURE = ORIENTATIONS.index(90.0) * len(SCALES) + SCALES.index(1.0)

STATS = slice(0, 4)
TEXTURE = slice(4, 76)
CURVATURE = slice(76, 85)
CONTEXT = slice(85, 181)

_CTX_PAD = max(CONTEXT_RADII) + 1


def reflect_index(i, n: int):
    """Map (possibly out-of-range) indices into [0, n) by mirror reflection."""
    if n == 1:
        return np.zeros_like(i)
    period = 2 * (n - 1)
    i = np.mod(i, period)
    return np.where(i > n - 1, period - i, i)


def minmax(a: np.ndarray) -> np.ndarray:
    lo, hi = a.min(), a.max()
    if hi == lo:
        return np.zeros_like(a, dtype=np.float64)
    return (a - lo) / (hi - lo)


# --------------------------------------------------------------------------
# Filter banks
# --------------------------------------------------------------------------

def gabor_kernels(orientation: float, scale: float) -> tuple[np.ndarray, np.ndarray]:
    """Even/odd Gabor quadrature pair.

    ``orientation`` is the direction of the stripes the filter responds to,
    so 90 degrees picks up vertical stripes (intensity varying along columns).
    The even kernel is made zero-mean so flat regions give no response.
    """
    sigma = 4.0 * scale
    wavelength = 8.0 * scale
    half = math.ceil(3 * sigma)
    y, x = np.mgrid[-half:half + 1, -half:half + 1].astype(np.float64)
    phi = math.radians(orientation + 90.0)
    xr = x * math.cos(phi) + y * math.sin(phi)
    yr = -x * math.sin(phi) + y * math.cos(phi)
    envelope = np.exp(-(xr ** 2 + yr ** 2) / (2 * sigma ** 2))
    even = envelope * np.cos(2 * math.pi * xr / wavelength)
    even -= envelope * (even.sum() / envelope.sum())
    odd = envelope * np.sin(2 * math.pi * xr / wavelength)
    return even, odd


def gabor_magnitude(image: np.ndarray, orientation: float, scale: float) -> np.ndarray:
    even, odd = gabor_kernels(orientation, scale)
    re = ndimage.correlate(image, even, mode="mirror")
    im = ndimage.correlate(image, odd, mode="mirror")
    return np.hypot(re, im)


def mean_curvature(image: np.ndarray, smoothing: float = 1.0) -> np.ndarray:
    """Mean curvature of the intensity surface z = I(x, y)."""
    g = ndimage.gaussian_filter(np.asarray(image, dtype=np.float64), smoothing, mode="mirror")
    p = np.pad(g, 1, mode="reflect")
    c = p[1:-1, 1:-1]
    ix = (p[1:-1, 2:] - p[1:-1, :-2]) / 2
    iy = (p[2:, 1:-1] - p[:-2, 1:-1]) / 2
    ixx = p[1:-1, 2:] - 2 * c + p[1:-1, :-2]
    iyy = p[2:, 1:-1] - 2 * c + p[:-2, 1:-1]
    ixy = (p[2:, 2:] - p[2:, :-2] - p[:-2, 2:] + p[:-2, :-2]) / 4
    num = (1 + ix ** 2) * iyy - 2 * ix * iy * ixy + (1 + iy ** 2) * ixx
    return num / (2 * (1 + ix ** 2 + iy ** 2) ** 1.5)


@dataclass(frozen=True)
class SectorTemplate:
    """Nine 40-degree sectors of the radius-15 disk inside a 31x31 patch.

    ``offsets[r]`` holds the (dy, dx) offsets of sector ``r``; the centre pixel
    belongs to sector 0.
    """

    radius: int = HALF
    offsets: tuple[np.ndarray, ...] = field(init=False)

    def __post_init__(self):
        rad = self.radius
        dy, dx = np.mgrid[-rad:rad + 1, -rad:rad + 1]
        inside = dy ** 2 + dx ** 2 <= rad ** 2
        angle = np.degrees(np.arctan2(dy, dx)) % 360.0
        sector = np.minimum((angle // (360.0 / N_SECTORS)).astype(int), N_SECTORS - 1)
        sector[rad, rad] = 0
        offs = tuple(
            np.column_stack([dy[inside & (sector == r)], dx[inside & (sector == r)]])
            for r in range(N_SECTORS)
        )
        object.__setattr__(self, "offsets", offs)

    @cached_property
    def kernels(self) -> np.ndarray:
        """(9, 2r+1, 2r+1) indicator stack."""
        size = 2 * self.radius + 1
        k = np.zeros((N_SECTORS, size, size))
        for r, off in enumerate(self.offsets):
            k[r, off[:, 0] + self.radius, off[:, 1] + self.radius] = 1.0
        return k


TEMPLATE = SectorTemplate()


@dataclass(frozen=True)
class FeatureContext:
    image: np.ndarray
    texture: np.ndarray          # (8, H, W), each normalised to [0, 1]
    curvature: np.ndarray        # (H, W), normalised to [0, 1]
    texture_raw: np.ndarray
    curvature_raw: np.ndarray

    @property
    def shape(self) -> tuple[int, int]:
        return self.image.shape

    def entropy_maps(self) -> list[np.ndarray]:
        return [*self.texture, self.curvature]


def build_feature_context(image: np.ndarray) -> FeatureContext:
    img = np.asarray(image, dtype=np.float64)
    raw = np.stack([gabor_magnitude(img, o, s) for o in ORIENTATIONS for s in SCALES])
    curv = mean_curvature(img)
    tex = np.stack([minmax(t) for t in raw])
    ctx = FeatureContext(img, tex, minmax(curv), raw, curv)
    for a in (ctx.texture, ctx.curvature, ctx.texture_raw, ctx.curvature_raw):
        a.setflags(write=False)
    return ctx


# --------------------------------------------------------------------------
# Single-pixel reference operations
# --------------------------------------------------------------------------

def _patch(a: np.ndarray, center: tuple[int, int], half: int = HALF) -> np.ndarray:
    r, c = center
    rows = reflect_index(np.arange(r - half, r + half + 1), a.shape[0])
    cols = reflect_index(np.arange(c - half, c + half + 1), a.shape[1])
    return a[np.ix_(rows, cols)]


def moments(values: np.ndarray) -> np.ndarray:
    """Mean, variance, skewness and kurtosis (standardised, not excess).

    Skewness and kurtosis are 0 when the variance is below 1e-12.
    """
    v = np.asarray(values, dtype=np.float64).ravel()
    mu = v.mean()
    d = v - mu
    m2 = np.mean(d * d)
    if m2 < 1e-12:
        return np.array([mu, m2, 0.0, 0.0])
    m3 = np.mean(d * d * d)
    m4 = np.mean(d * d * d * d)
    return np.array([mu, m2, m3 / m2 ** 1.5, m4 / m2 ** 2])


def intensity_stats(image: np.ndarray, center: tuple[int, int]) -> np.ndarray:
    return moments(_patch(image, center))


def histogram_entropy(values: np.ndarray, bins: int = N_BINS) -> float:
    """Base-2 Shannon entropy of a ``bins``-bin histogram over [0, 1]."""
    idx = np.minimum((np.asarray(values) * bins).astype(np.int64), bins - 1)
    counts = np.bincount(idx.ravel(), minlength=bins)
    p = counts[counts > 0] / counts.sum()
    return float(-(p * np.log2(p)).sum()) + 0.0


def sector_entropy(
    map_: np.ndarray,
    center: tuple[int, int],
    template: SectorTemplate = TEMPLATE,
    bins: int = N_BINS,
) -> np.ndarray:
    r, c = center
    out = np.empty(N_SECTORS)
    for k, off in enumerate(template.offsets):
        rows = reflect_index(r + off[:, 0], map_.shape[0])
        cols = reflect_index(c + off[:, 1], map_.shape[1])
        out[k] = histogram_entropy(map_[rows, cols], bins)
    return out


def context_offsets() -> np.ndarray:
    """(32, 2) (dy, dx) sample offsets, ray-major then radius."""
    offs = []
    for k in range(CONTEXT_RAYS):
        phi = math.radians(45.0 * k)
        for d in CONTEXT_RADII:
            offs.append((int(round(d * math.sin(phi))), int(round(d * math.cos(phi)))))
    return np.array(offs)


def _context_channels(ctx: FeatureContext) -> list[np.ndarray]:
    return [ctx.image, ctx.texture[CONTEXT_TEXTURE], ctx.curvature]


def context_features(ctx: FeatureContext, center: tuple[int, int]) -> np.ndarray:
    r, c = center
    out = []
    for dy, dx in context_offsets():
        for ch in _context_channels(ctx):
            out.append(_patch(ch, (r + dy, c + dx), half=1).sum() / 9.0)
    return np.array(out)


def feature_vector(ctx: FeatureContext, center: tuple[int, int]) -> np.ndarray:
    """181-dim descriptor of one pixel, computed directly (no caching)."""
    parts = [intensity_stats(ctx.image, center)]
    for m in ctx.entropy_maps():
        parts.append(sector_entropy(m, center))
    parts.append(context_features(ctx, center))
    return np.concatenate(parts)


# --------------------------------------------------------------------------
# Vectorised extraction over many pixels
# --------------------------------------------------------------------------

def _window(shape: tuple[int, int], pixels: np.ndarray, pad: int) -> tuple[slice, slice]:
    """Slice of a ``pad``-padded array covering every pixel's neighbourhood."""
    r0, c0 = pixels.min(axis=0)
    r1, c1 = pixels.max(axis=0)
    return slice(r0, r1 + 2 * pad + 1), slice(c0, c1 + 2 * pad + 1)


def _stats_block(image: np.ndarray, pixels: np.ndarray, chunk: int = 2048) -> np.ndarray:
    padded = np.pad(image, HALF, mode="reflect")
    windows = sliding_window_view(padded, (PATCH, PATCH))
    out = np.empty((len(pixels), 4))
    for s in range(0, len(pixels), chunk):
        px = pixels[s:s + chunk]
        patches = windows[px[:, 0], px[:, 1]].reshape(len(px), -1)
        mu = patches.mean(axis=1)
        d = patches - mu[:, None]
        d2 = d * d
        m2 = d2.mean(axis=1)
        m3 = (d2 * d).mean(axis=1)
        m4 = (d2 * d2).mean(axis=1)
        flat = m2 < 1e-12
        safe = np.where(flat, 1.0, m2)
        out[s:s + chunk, 0] = mu
        out[s:s + chunk, 1] = m2
        out[s:s + chunk, 2] = np.where(flat, 0.0, m3 / safe ** 1.5)
        out[s:s + chunk, 3] = np.where(flat, 0.0, m4 / safe ** 2)
    return out


def _entropy_block(map_: np.ndarray, pixels: np.ndarray, template: SectorTemplate,
                   bins: int) -> np.ndarray:
    rad = template.radius
    q = np.minimum((map_ * bins).astype(np.int64), bins - 1)
    win = _window(map_.shape, pixels, rad)
    qp = np.pad(q, rad, mode="reflect")[win]
    onehot = (qp[None] == np.arange(bins)[:, None, None]).astype(np.float64)
    # circular correlation on the padded window; the valid region never wraps
    fshape = qp.shape
    spec = sfft.rfft2(onehot, s=fshape)
    kspec = np.conj(sfft.rfft2(template.kernels, s=fshape))
    counts = sfft.irfft2(spec[:, None] * kspec[None], s=fshape)
    rr = pixels[:, 0] - pixels[:, 0].min()
    cc = pixels[:, 1] - pixels[:, 1].min()
    c = np.rint(counts[:, :, rr, cc])          # (bins, 9, n)
    total = c.sum(axis=0)
    p = c / total
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(c > 0, p * np.log2(np.where(c > 0, p, 1.0)), 0.0)
    return (-terms.sum(axis=0)).T + 0.0        # (n, 9)


def _context_block(ctx: FeatureContext, pixels: np.ndarray) -> np.ndarray:
    offs = context_offsets()
    out = np.empty((len(pixels), len(offs), 3))
    win = _window(ctx.shape, pixels, _CTX_PAD)
    r0, c0 = pixels.min(axis=0)
    for ch, a in enumerate(_context_channels(ctx)):
        p = np.pad(a, _CTX_PAD, mode="reflect")[win]
        box = np.zeros((p.shape[0] - 2, p.shape[1] - 2))
        for dy in range(3):
            for dx in range(3):
                box += p[dy:dy + box.shape[0], dx:dx + box.shape[1]]
        box /= 9.0
        # box[i, j] is the 3x3 mean centred at padded (i + 1, j + 1)
        base_r = pixels[:, 0] - r0 + _CTX_PAD - 1
        base_c = pixels[:, 1] - c0 + _CTX_PAD - 1
        for k, (dy, dx) in enumerate(offs):
            out[:, k, ch] = box[base_r + dy, base_c + dx]
    return out.reshape(len(pixels), -1)


def feature_matrix(ctx: FeatureContext, pixels: np.ndarray, template: SectorTemplate = TEMPLATE,
                   bins: int = N_BINS, dtype=np.float64) -> np.ndarray:
    """Descriptors for many (row, col) pixels at once; row i matches ``pixels[i]``."""
    pixels = np.asarray(pixels, dtype=np.int64).reshape(-1, 2)
    X = np.empty((len(pixels), N_FEATURES), dtype=dtype)
    if len(pixels) == 0:
        return X
    X[:, STATS] = _stats_block(ctx.image, pixels)
    ent = [_entropy_block(m, pixels, template, bins) for m in ctx.entropy_maps()]
    X[:, 4:85] = np.concatenate(ent, axis=1)
    X[:, CONTEXT] = _context_block(ctx, pixels)
    return X


def write_feature_csv(path, pixels: np.ndarray, X: np.ndarray) -> None:
    """Debug dump: header ``px,py,f0..f180``; px is the column, py the row."""
    header = "px,py," + ",".join(f"f{i}" for i in range(X.shape[1]))
    rows = np.column_stack([pixels[:, 1], pixels[:, 0], X])
    fmt = ["%d", "%d"] + ["%.10g"] * X.shape[1]
    np.savetxt(path, rows, delimiter=",", header=header, comments="", fmt=fmt)
