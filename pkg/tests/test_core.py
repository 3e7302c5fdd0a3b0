import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from consensus_fuse.core import (AnnotationSet, Roi, Slice, compute_roi, load_dataset, load_image,
                                 load_mask, normalize, read_pgm, write_mask, write_pgm)
from consensus_fuse.errors import ConsensusError

# 4x4 checkerboard (top-left 0) written as 8-bit PGM
CHECKER_GOLDEN = bytes.fromhex(
    "50350a3420340a3235350a"
    "00ff00ff" "ff00ff00" "00ff00ff" "ff00ff00"
)


def _manifest(tmp_path, masks_per_slice, shape=(6, 5)):
    slices = []
    for k, masks in enumerate(masks_per_slice):
        img = np.arange(np.prod(shape), dtype=np.uint8).reshape(shape)
        write_pgm(tmp_path / f"img{k}.pgm", img)
        entry = []
        for r, m in enumerate(masks):
            if m is None:
                entry.append(None)
            else:
                write_mask(m, tmp_path / f"m{k}_{r}.pgm")
                entry.append(f"m{k}_{r}.pgm")
        slices.append({"image": f"img{k}.pgm", "masks": entry})
    doc = {"dataset": "t", "seed": 1, "experts": [f"e{r}" for r in range(len(masks_per_slice[0]))],
           "slices": slices}
    (tmp_path / "manifest.json").write_text(json.dumps(doc))
    return tmp_path / "manifest.json"


def test_manifest_with_one_null_mask(tmp_path):
    m = np.zeros((6, 5), np.uint8)
    m[2, 2] = 1
    path = _manifest(tmp_path, [[m, m, None], [m, m, m]])
    ann = load_dataset(path)
    assert ann.n_experts == 3 and len(ann.slices) == 2
    assert ann.missing_flags().sum() == 1
    assert ann.missing_flags()[0, 2]


def test_constant_image_normalizes_to_zero(tmp_path):
    write_pgm(tmp_path / "c.pgm", np.full((4, 7), 93, np.uint8))
    img = load_image(tmp_path / "c.pgm")
    assert img.shape == (4, 7) and np.all(img == 0.0)


def test_16bit_pgm_rescale(tmp_path):
    raw = np.array([[0, 32768, 65535]], dtype=np.uint16)
    write_pgm(tmp_path / "w.pgm", raw)
    assert (tmp_path / "w.pgm").read_bytes().startswith(b"P5\n3 1\n65535\n")
    img = load_image(tmp_path / "w.pgm")
    np.testing.assert_allclose(img.ravel(), [0.0, 0.5, 1.0], atol=1e-4)


def test_pgm_header_comments_and_big_endian(tmp_path):
    (tmp_path / "x.pgm").write_bytes(b"P5\n# comment\n2 1\n# another\n65535\n\x01\x02\xff\x00")
    assert read_pgm(tmp_path / "x.pgm").tolist() == [[258, 65280]]


@pytest.mark.parametrize("payload", [b"P2\n1 1\n255\n0", b"P5\n2 2\n255\n\x00", b"P5\nx 2\n255\n"])
def test_malformed_pgm(tmp_path, payload):
    (tmp_path / "bad.pgm").write_bytes(payload)
    with pytest.raises(ConsensusError) as exc:
        read_pgm(tmp_path / "bad.pgm")
    assert exc.value.category == "malformed-pgm"


def test_missing_file(tmp_path):
    with pytest.raises(ConsensusError) as exc:
        load_dataset(tmp_path / "nope.json")
    assert exc.value.category == "missing-file"


def test_dimension_mismatch(tmp_path):
    m = np.zeros((6, 5), np.uint8)
    path = _manifest(tmp_path, [[m, m]])
    write_mask(np.zeros((3, 3), np.uint8), tmp_path / "m0_1.pgm")
    with pytest.raises(ConsensusError) as exc:
        load_dataset(path)
    assert exc.value.category == "dimension-mismatch"


def test_all_experts_missing(tmp_path):
    m = np.zeros((6, 5), np.uint8)
    path = _manifest(tmp_path, [[m, m], [None, None]])
    with pytest.raises(ConsensusError) as exc:
        load_dataset(path)
    assert exc.value.category == "all-experts-missing"


def test_roi_single_pixel():
    m = np.zeros((400, 400), np.uint8)
    m[50, 50] = 1
    assert compute_roi([m], 20) == Roi(30, 30, 70, 70)


def test_roi_clamped_at_border():
    m = np.zeros((100, 100), np.uint8)
    m[0, 0] = 1
    roi = compute_roi([m], 20)
    assert (roi.x0, roi.y0) == (0, 0) and (roi.x1, roi.y1) == (20, 20)


def test_roi_two_disjoint_blobs_matches_scan():
    h, w = 120, 90
    a = np.zeros((h, w), np.uint8)
    b = np.zeros((h, w), np.uint8)
    a[10:14, 60:70] = 1
    b[80:95, 5:9] = 1
    rows = [r for r in range(h) for c in range(w) if a[r, c] or b[r, c]]
    cols = [c for r in range(h) for c in range(w) if a[r, c] or b[r, c]]
    expect = Roi(max(min(cols) - 20, 0), max(min(rows) - 20, 0),
                 min(max(cols) + 20, w - 1), min(max(rows) + 20, h - 1))
    assert compute_roi([a, None, b], 20) == expect


def test_roi_empty_union():
    with pytest.raises(ConsensusError) as exc:
        compute_roi([np.zeros((5, 5), np.uint8), None])
    assert exc.value.category == "empty-annotation-union"


def test_roi_pixels_row_major():
    roi = Roi(2, 1, 3, 2)
    assert roi.pixels().tolist() == [[1, 2], [1, 3], [2, 2], [2, 3]]
    assert roi.shape == (2, 2)


def test_all_zero_mask_file(tmp_path):
    write_mask(np.zeros((3, 2), np.uint8), tmp_path / "z.pgm")
    assert (tmp_path / "z.pgm").read_bytes() == b"P5\n2 3\n255\n" + bytes(6)


def test_checkerboard_golden_bytes(tmp_path):
    cb = (np.add.outer(np.arange(4), np.arange(4)) % 2).astype(np.uint8)
    write_mask(cb, tmp_path / "cb.pgm")
    assert (tmp_path / "cb.pgm").read_bytes() == CHECKER_GOLDEN


def test_write_mask_rejects_non_binary(tmp_path):
    with pytest.raises(ConsensusError):
        write_mask(np.array([[0, 2]]), tmp_path / "x.pgm")


masks = arrays(np.uint8, st.tuples(st.integers(1, 12), st.integers(1, 12)), elements=st.integers(0, 1))


@given(masks)
def test_mask_round_trip(tmp_path_factory, m):
    path = tmp_path_factory.mktemp("rt") / "m.pgm"
    write_mask(m, path)
    np.testing.assert_array_equal(load_mask(path), m)


@given(masks, st.integers(0, 11), st.integers(0, 11), st.integers(0, 25))
def test_roi_monotone(m, r, c, margin):
    if not m.any():
        m = m.copy()
        m[0, 0] = 1
    grown = m.copy()
    grown[min(r, m.shape[0] - 1), min(c, m.shape[1] - 1)] = 1
    a, b = compute_roi([m], margin), compute_roi([grown], margin)
    assert b.x0 <= a.x0 and b.y0 <= a.y0 and b.x1 >= a.x1 and b.y1 >= a.y1


@given(arrays(np.float64, st.tuples(st.integers(1, 8), st.integers(1, 8)),
              elements=st.floats(-1e3, 1e3, allow_nan=False)))
def test_normalize_idempotent_and_bounded(x):
    once = normalize(x)
    assert once.min() >= 0 and once.max() <= 1
    np.testing.assert_allclose(normalize(once), once, atol=1e-12)


def test_restored_puts_withheld_back():
    img = np.zeros((4, 4))
    m = np.ones((4, 4), np.uint8)
    s = Slice(img, [m, None], "c", None, {1: m})
    ann = AnnotationSet(["a", "b"], [s])
    assert not ann.restored().missing_flags().any()
    assert ann.missing_flags().sum() == 1


def test_loaded_arrays_are_read_only(tmp_path):
    m = np.zeros((6, 5), np.uint8)
    m[1, 1] = 1
    ann = load_dataset(_manifest(tmp_path, [[m, m]]))
    with pytest.raises(ValueError):
        ann.slices[0].image[0, 0] = 1.0
