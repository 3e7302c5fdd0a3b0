import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from consensus_fuse.features import (CONTEXT_TEXTURE, CURVATURE, N_FEATURES, ORIENTATIONS, SCALES, TEMPLATE,
                                     TEXTURE, build_feature_context, context_features, feature_matrix,
                                     feature_vector, histogram_entropy, intensity_stats, moments,
                                     sector_entropy)

from oracles import moments_loop


@pytest.fixture(scope="module")
def textured():
    rng = np.random.default_rng(8)
    yy, xx = np.mgrid[:48, :40]
    img = 0.5 + 0.3 * np.sin(xx / 3.0) * np.cos(yy / 5.0) + 0.1 * rng.normal(size=(48, 40))
    return build_feature_context(np.clip(img, 0, 1))


def test_constant_image_maps_are_zero():
    ctx = build_feature_context(np.full((40, 40), 0.3))
    assert np.all(ctx.texture == 0) and np.all(ctx.curvature == 0)
    v = feature_vector(ctx, (0, 0))
    assert np.all(np.isfinite(v)) and len(v) == N_FEATURES
    ctxf = context_features(ctx, (20, 20)).reshape(32, 3)
    np.testing.assert_allclose(ctxf[:, 0], 0.3, atol=1e-12)
    assert np.all(ctxf[:, 1:] == 0)


def test_vertical_stripes_pick_ninety_degrees():
    xx = np.mgrid[:64, :64][1]
    ctx = build_feature_context(0.5 + 0.5 * np.cos(2 * np.pi * xx / 8.0))
    s = SCALES.index(1.0)
    means = [ctx.texture_raw[k * len(SCALES) + s][16:48, 16:48].mean() for k in range(len(ORIENTATIONS))]
    assert int(np.argmax(means)) == ORIENTATIONS.index(90.0)


def test_ramp_has_zero_curvature():
    xx = np.mgrid[:40, :50][1]
    ctx = build_feature_context(xx / 50.0)
    assert np.abs(ctx.curvature_raw[5:-5, 5:-5]).max() < 1e-10


def test_moment_examples():
    np.testing.assert_allclose(moments(np.full(20, 0.4)), [0.4, 0, 0, 0], atol=1e-15)
    np.testing.assert_allclose(moments(np.r_[np.zeros(50), np.ones(50)]), [0.5, 0.25, 0, 1], atol=1e-12)
    assert moments(np.tile([0, 0, 0, 1], 10))[2] > 0


@given(st.integers(0, 10_000), st.integers(0, 39), st.integers(0, 47))
def test_intensity_stats_match_loop(seed, c, r):
    img = np.random.default_rng(seed).uniform(size=(48, 40))
    got = intensity_stats(img, (r, c))
    rows = [abs(i) if i >= 0 else -i for i in range(r - 15, r + 16)]
    rows = [2 * 47 - i if i > 47 else i for i in rows]
    cols = [abs(i) if i >= 0 else -i for i in range(c - 15, c + 16)]
    cols = [2 * 39 - i if i > 39 else i for i in cols]
    ref = moments_loop([img[i, j] for i in rows for j in cols])
    np.testing.assert_allclose(got, ref, rtol=1e-9, atol=1e-12)


def test_entropy_examples():
    assert histogram_entropy(np.full(30, 0.52)) == 0.0
    assert histogram_entropy((np.arange(16) + 0.5) / 16) == pytest.approx(4.0, abs=1e-12)
    assert histogram_entropy(np.r_[np.full(10, 0.1), np.full(10, 0.9)]) == pytest.approx(1.0, abs=1e-12)


def test_sector_template_partitions_disk():
    cells = np.concatenate(TEMPLATE.offsets)
    assert len(TEMPLATE.offsets) == 9
    assert len({tuple(p) for p in cells}) == len(cells)
    dy, dx = np.mgrid[-15:16, -15:16]
    assert len(cells) == int((dy ** 2 + dx ** 2 <= 225).sum())
    assert (TEMPLATE.offsets[0] == [0, 0]).all(1).any()


def test_step_edge_context():
    img = np.zeros((60, 60))
    img[:, 30:] = 1.0
    ctxf = context_features(build_feature_context(img), (30, 30)).reshape(8, 4, 3)
    # ray 0 points along +columns (bright half), ray 4 along -columns (dark half)
    assert np.all(ctxf[0, :, 0] == 1.0) and np.all(ctxf[4, 1:, 0] == 0.0)


def test_vector_layout(textured):
    ctx = textured
    v = feature_vector(ctx, (20, 17))
    assert len(v) == 181
    tex = np.concatenate([sector_entropy(m, (20, 17)) for m in ctx.texture])
    np.testing.assert_array_equal(v[TEXTURE], tex)
    np.testing.assert_array_equal(v[CURVATURE], sector_entropy(ctx.curvature, (20, 17)))
    assert CONTEXT_TEXTURE == ORIENTATIONS.index(90.0) * 2 + 1


def test_matrix_matches_vector(textured):
    px = np.array([[0, 0], [47, 39], [0, 39], [5, 20], [24, 12], [47, 0], [30, 33]])
    M = feature_matrix(textured, px)
    ref = np.stack([feature_vector(textured, tuple(p)) for p in px])
    np.testing.assert_allclose(M, ref, rtol=1e-9, atol=1e-9)
    assert np.all(np.isfinite(M))
    ent = M[:, 4:85]
    assert ent.min() >= 0 and ent.max() <= 4 + 1e-12


def test_deterministic(textured):
    again = build_feature_context(textured.image.copy())
    np.testing.assert_array_equal(feature_vector(again, (9, 9)), feature_vector(textured, (9, 9)))


def test_translation_consistency():
    yy, xx = np.mgrid[:21, :21]
    blob = 0.2 + 0.6 * ((yy - 10) ** 2 + (xx - 10) ** 2 < 50) + 0.05 * np.sin(xx)
    a = np.full((110, 110), 0.2)
    b = a.copy()
    a[30:51, 30:51] = blob
    b[40:61, 37:58] = blob
    ca, cb = build_feature_context(a), build_feature_context(b)
    for r, c in ((40, 40), (35, 44), (50, 31)):
        np.testing.assert_allclose(feature_vector(ca, (r, c)), feature_vector(cb, (r + 10, c + 7)), atol=1e-9)
