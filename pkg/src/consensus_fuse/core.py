"""Data model and I/O: PGM images, masks, annotation sets, ROIs, manifests.

Images are 2D ``float64`` arrays in [0, 1] (row-major, ``shape == (height, width)``).
Masks are 2D ``uint8`` arrays with values in {0, 1}. Both are returned read-only.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConsensusError, DimensionMismatch, ManifestError, PgmError

ROI_MARGIN = 20


def _frozen(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


# --------------------------------------------------------------------------
# PGM (P5)
# --------------------------------------------------------------------------

def _header_tokens(buf: bytes, count: int) -> tuple[list[bytes], int]:
    tokens: list[bytes] = []
    pos = 0
    n = len(buf)
    while len(tokens) < count:
        while pos < n and buf[pos:pos + 1].isspace():
            pos += 1
        if pos < n and buf[pos:pos + 1] == b"#":
            while pos < n and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and not buf[pos:pos + 1].isspace() and buf[pos:pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise PgmError("truncated header")
        tokens.append(buf[start:pos])
    # exactly one whitespace byte separates maxval from the raster
    return tokens, pos + 1


def read_pgm(path: str | os.PathLike) -> np.ndarray:
    """Read a binary PGM, returning raw integer samples (uint8 or uint16)."""
    try:
        buf = Path(path).read_bytes()
    except FileNotFoundError:
        raise ConsensusError(f"{path}: no such file", "missing-file") from None
    except OSError as exc:
        raise ConsensusError(f"{path}: {exc}", "io") from None
    tokens, offset = _header_tokens(buf, 4)
    if tokens[0] != b"P5":
        raise PgmError(f"{path}: not a binary PGM (magic {tokens[0]!r})")
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise PgmError(f"{path}: non-integer header field") from None
    if width <= 0 or height <= 0 or not 0 < maxval < 65536:
        raise PgmError(f"{path}: bad header {width}x{height} maxval={maxval}")
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    expected = width * height * dtype.itemsize
    raster = buf[offset:offset + expected]
    if len(raster) != expected:
        raise PgmError(f"{path}: expected {expected} raster bytes, got {len(raster)}")
    data = np.frombuffer(raster, dtype=dtype).reshape(height, width)
    return data.astype(np.uint16 if maxval > 255 else np.uint8)


def write_pgm(path: str | os.PathLike, data: np.ndarray, maxval: int | None = None) -> None:
    data = np.asarray(data)
    if data.ndim != 2:
        raise PgmError("PGM data must be 2D")
    if maxval is None:
        maxval = 65535 if data.dtype == np.uint16 else 255
    height, width = data.shape
    raster = data.astype(">u2" if maxval > 255 else "u1").tobytes()
    header = f"P5\n{width} {height}\n{maxval}\n".encode("ascii")
    try:
        Path(path).write_bytes(header + raster)
    except OSError as exc:
        raise ConsensusError(f"{path}: {exc}", "io") from None


def normalize(raw: np.ndarray) -> np.ndarray:
    """Min-max rescale to [0, 1]; a constant image maps to all zeros."""
    v = np.asarray(raw, dtype=np.float64)
    lo, hi = v.min(), v.max()
    if hi == lo:
        return np.zeros_like(v)
    return (v - lo) / (hi - lo)


def load_image(path: str | os.PathLike) -> np.ndarray:
    return _frozen(normalize(read_pgm(path)))


def load_mask(path: str | os.PathLike) -> np.ndarray:
    return _frozen((read_pgm(path) > 0).astype(np.uint8))


def write_mask(mask: np.ndarray, path: str | os.PathLike) -> None:
    """Write a binary mask as 8-bit PGM (1 -> 255)."""
    m = np.asarray(mask)
    if m.ndim != 2 or not np.isin(m, (0, 1)).all():
        raise ConsensusError("mask must be a 2D array of 0/1", "invalid-mask")
    write_pgm(path, m.astype(np.uint8) * 255, maxval=255)


def write_image(image: np.ndarray, path: str | os.PathLike) -> None:
    """Write a [0, 1] image as 16-bit PGM."""
    q = np.rint(np.clip(image, 0.0, 1.0) * 65535).astype(np.uint16)
    write_pgm(path, q, maxval=65535)


# --------------------------------------------------------------------------
# Annotation model
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class Roi:
    """Inclusive pixel bounds; x indexes columns, y indexes rows."""

    x0: int
    y0: int
    x1: int
    y1: int

    @property
    def shape(self) -> tuple[int, int]:
        return (self.y1 - self.y0 + 1, self.x1 - self.x0 + 1)

    @property
    def slices(self) -> tuple[slice, slice]:
        return (slice(self.y0, self.y1 + 1), slice(self.x0, self.x1 + 1))

    def pixels(self) -> np.ndarray:
        """(n, 2) array of (row, col) for every ROI pixel in row-major order."""
        rows, cols = np.mgrid[self.y0:self.y1 + 1, self.x0:self.x1 + 1]
        return np.column_stack([rows.ravel(), cols.ravel()])

    def to_list(self) -> list[int]:
        return [self.x0, self.y0, self.x1, self.y1]


@dataclass
class Slice:
    image: np.ndarray
    masks: list[np.ndarray | None]
    name: str = ""
    gt: np.ndarray | None = None
    withheld: dict[int, np.ndarray] = field(default_factory=dict)

    @property
    def missing(self) -> list[int]:
        return [r for r, m in enumerate(self.masks) if m is None]

    def present(self) -> list[np.ndarray]:
        return [m for m in self.masks if m is not None]


@dataclass
class AnnotationSet:
    experts: list[str]
    slices: list[Slice]
    dataset: str = ""
    seed: int = 0

    def __post_init__(self):
        if len(self.experts) < 1:
            raise ConsensusError("need at least one expert", "invalid-annotations")
        for k, s in enumerate(self.slices):
            if len(s.masks) != len(self.experts):
                raise ManifestError(f"slice {k}: {len(s.masks)} masks for {len(self.experts)} experts")
            if all(m is None for m in s.masks):
                raise ConsensusError(f"slice {k}: every expert mask is missing", "all-experts-missing")
            for m in s.present():
                if m.shape != s.image.shape:
                    raise DimensionMismatch(f"slice {k}: mask {m.shape} vs image {s.image.shape}")

    @property
    def n_experts(self) -> int:
        return len(self.experts)

    def missing_flags(self) -> np.ndarray:
        """Boolean (n_slices, n_experts) array; True marks a missing mask."""
        return np.array([[m is None for m in s.masks] for s in self.slices], dtype=bool)

    def with_masks(self, masks: list[list[np.ndarray | None]]) -> AnnotationSet:
        slices = [Slice(s.image, list(ms), s.name, s.gt, dict(s.withheld))
                  for s, ms in zip(self.slices, masks)]
        return AnnotationSet(list(self.experts), slices, self.dataset, self.seed)

    def restored(self) -> AnnotationSet:
        """Copy with withheld sidecar masks put back in place of missing entries."""
        masks = []
        for s in self.slices:
            masks.append([s.withheld.get(r, m) if m is None else m for r, m in enumerate(s.masks)])
        return self.with_masks(masks)


def compute_roi(masks: list[np.ndarray | None], margin: int = ROI_MARGIN) -> Roi:
    """Bounding box of the union of present masks, grown by ``margin`` and clamped."""
    present = [m for m in masks if m is not None]
    if not present:
        raise ConsensusError("no masks on slice", "empty-annotation-union")
    union = np.logical_or.reduce([np.asarray(m) > 0 for m in present])
    rows = np.flatnonzero(union.any(axis=1))
    cols = np.flatnonzero(union.any(axis=0))
    if rows.size == 0:
        raise ConsensusError("all present masks are empty", "empty-annotation-union")
    h, w = union.shape
    return Roi(
        x0=max(int(cols[0]) - margin, 0),
        y0=max(int(rows[0]) - margin, 0),
        x1=min(int(cols[-1]) + margin, w - 1),
        y1=min(int(rows[-1]) + margin, h - 1),
    )


# --------------------------------------------------------------------------
# Manifest
# --------------------------------------------------------------------------

@dataclass
class SliceEntry:
    image: str
    masks: list[str | None]
    name: str = ""
    gt: str | None = None
    withheld: dict[int, str] = field(default_factory=dict)

    def to_json(self) -> dict:
        d: dict = {"image": self.image, "masks": list(self.masks)}
        if self.name:
            d["case"] = self.name
        if self.gt is not None:
            d["gt"] = self.gt
        if self.withheld:
            d["withheld"] = {str(k): v for k, v in sorted(self.withheld.items())}
        return d


@dataclass
class DatasetManifest:
    dataset: str
    seed: int
    experts: list[str]
    slices: list[SliceEntry]

    def to_json(self) -> dict:
        return {
            "dataset": self.dataset,
            "seed": self.seed,
            "experts": list(self.experts),
            "slices": [s.to_json() for s in self.slices],
        }

    def save(self, path: str | os.PathLike) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2) + "\n")

    @classmethod
    def load(cls, path: str | os.PathLike) -> DatasetManifest:
        try:
            doc = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConsensusError(f"{path}: no such file", "missing-file") from None
        except json.JSONDecodeError as exc:
            raise ManifestError(f"{path}: {exc}") from None
        try:
            experts = [str(e) for e in doc["experts"]]
            slices = []
            for k, s in enumerate(doc["slices"]):
                if len(s["masks"]) != len(experts):
                    raise ManifestError(f"slice {k}: mask list length differs from expert list")
                slices.append(SliceEntry(
                    image=s["image"],
                    masks=list(s["masks"]),
                    name=s.get("case", f"slice_{k:04d}"),
                    gt=s.get("gt"),
                    withheld={int(r): p for r, p in s.get("withheld", {}).items()},
                ))
            return cls(str(doc["dataset"]), int(doc.get("seed", 0)), experts, slices)
        except (KeyError, TypeError) as exc:
            raise ManifestError(f"{path}: missing or malformed field {exc}") from None


def load_dataset(manifest_path: str | os.PathLike, with_sidecars: bool = True) -> AnnotationSet:
    """Load every image and mask referenced by a manifest.

    Paths in the manifest are relative to the manifest's directory.
    """
    manifest = DatasetManifest.load(manifest_path)
    base = Path(manifest_path).parent
    slices = []
    for entry in manifest.slices:
        image = load_image(base / entry.image)
        masks = [None if p is None else load_mask(base / p) for p in entry.masks]
        gt = None
        withheld = {}
        if with_sidecars:
            if entry.gt is not None:
                gt = load_mask(base / entry.gt)
            withheld = {r: load_mask(base / p) for r, p in entry.withheld.items()}
        for m in [gt, *withheld.values()]:
            if m is not None and m.shape != image.shape:
                raise DimensionMismatch(f"{entry.name}: sidecar mask shape {m.shape} vs image {image.shape}")
        slices.append(Slice(image, masks, entry.name, gt, withheld))
    return AnnotationSet(manifest.experts, slices, manifest.dataset, manifest.seed)
