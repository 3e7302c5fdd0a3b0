import numpy as np
import pytest

from consensus_fuse.consistency import (ScReport, forest_sc, node_gain_estimate, path_performance,
                                        self_consistency, tree_path_performance)
from consensus_fuse.core import AnnotationSet, Slice
from consensus_fuse.errors import ConsensusError
from consensus_fuse.forest import ForestConfig, Tree, train_probe

from oracles import entropy_bits

CFG = ForestConfig(n_trees=4, max_depth=8)


def _chain_tree(n_samples, gains):
    """A left-leaning chain of split nodes with given sample counts and Ê."""
    m = len(n_samples)
    n = 2 * m + 1
    feature = np.full(n, -1)
    left = np.full(n, -1)
    right = np.full(n, -1)
    parent = np.full(n, -1)
    g = np.full((n, 1), np.nan)
    counts = np.zeros(n, int)
    for j in range(m):
        feature[j] = 0
        left[j] = j + 1 if j + 1 < m else m
        right[j] = m + 1 + j
        g[j, 0] = gains[j]
        counts[j] = n_samples[j]
        if j:
            parent[j] = j - 1
    for j in range(m, n):
        parent[j] = m - 1 if j == m else j - m - 1
    return Tree(feature, np.zeros(n), left, right, parent, np.zeros(n, int), counts,
                np.ones((n, 2)), g)


def test_gain_estimate_examples():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(200, 3))
    cand = [(f, t) for f in range(3) for t in (-0.5, 0.0, 0.5)]
    assert node_gain_estimate(X, np.ones(200), cand) == 0.0
    y = (X[:, 0] > 0).astype(int)
    assert node_gain_estimate(X, y, [(0, 0.0)]) == pytest.approx(entropy_bits(y.tolist()), abs=1e-12)
    X = rng.normal(size=(1000, 50))
    y = rng.integers(0, 2, 1000)
    cand = [(f, float(np.median(X[:, f]))) for f in range(50)]
    assert node_gain_estimate(X, y, cand) < 0.05


def test_gain_estimate_ignores_unlabeled_and_rejects_empty():
    X = np.arange(6.0)[:, None]
    y = np.array([0, 0, -1, 1, 1, -1])
    assert node_gain_estimate(X, y, [(0, 2.5)]) == pytest.approx(1.0)
    with pytest.raises(ConsensusError) as exc:
        node_gain_estimate(X, y, [])
    assert exc.value.category == "no-candidates"


def test_path_performance_examples():
    t = _chain_tree([100, 40], [0.5, 0.9])
    assert path_performance(t, 0, 0) == pytest.approx(0.5)
    assert path_performance(t, 1, 0) == pytest.approx(0.6143, abs=1e-4)
    t = _chain_tree([50, 30, 10], [0.3, 0.3, 0.3])
    assert path_performance(t, 2, 0) == pytest.approx(0.3)
    np.testing.assert_allclose(tree_path_performance(t)[:, 0], [path_performance(t, j, 0) for j in range(3)])


def test_path_performance_needs_estimates():
    t = _chain_tree([10], [0.1])
    t.gains = None
    with pytest.raises(ConsensusError) as exc:
        path_performance(t, 0, 0)
    assert exc.value.category == "no-estimates"


def test_vectorised_path_matches_walk(rng):
    X = rng.normal(size=(400, 6))
    Y = np.stack([(X[:, 0] > 0), rng.integers(0, 2, 400)], axis=1).astype(np.int8)
    f = train_probe(X, Y, CFG, seed=1)
    for t in f.trees:
        q = tree_path_performance(t)
        ref = [[path_performance(t, j, r) for r in range(2)] for j in t.split_nodes]
        np.testing.assert_allclose(q, ref, atol=1e-12)
    sc = forest_sc(f)
    assert np.all((sc >= 0) & (sc <= 1))
    # labels driven by one strong feature beat labels independent of every feature
    assert sc[0] > sc[1]


def _annotations(masks_per_expert, images):
    slices = [Slice(img, [m[k] for m in masks_per_expert], f"s{k}", None, {}) for k, img in enumerate(images)]
    return AnnotationSet([f"e{r}" for r in range(len(masks_per_expert))], slices)


def test_identical_experts_share_sc(small_features):
    ann, store, rois = small_features
    gt = [s.gt for s in ann.slices]
    same = _annotations([gt, gt, gt], [s.image for s in ann.slices])
    rep = self_consistency(same, rois=rois, config=CFG, features=store.matrices(rois))
    assert rep.sc[0] == rep.sc[1] == rep.sc[2]
    assert np.all((rep.sc >= 0) & (rep.sc <= 1))


def test_permutation_equivariance(small_features):
    ann, store, rois = small_features
    full = ann.restored()
    experts = [[s.masks[r] for s in full.slices] for r in range(3)]
    images = [s.image for s in full.slices]
    a = self_consistency(_annotations(experts, images), rois=rois, config=CFG, features=store.matrices(rois))
    b = self_consistency(_annotations(experts[::-1], images), rois=rois, config=CFG, features=store.matrices(rois))
    # weighted sums run in a different order, so agreement is to rounding only
    np.testing.assert_allclose(a.sc, b.sc[::-1], atol=1e-6)


def test_duplicate_expert_with_renormalised_weights(small_features):
    ann, store, rois = small_features
    full = ann.restored()
    a, b = ([s.masks[r] for s in full.slices] for r in (0, 1))
    images = [s.image for s in full.slices]
    feats = store.matrices(rois)
    two = self_consistency(_annotations([a, b], images), rois=rois, config=CFG, features=feats)
    three = self_consistency(_annotations([a, b, b], images), rois=rois, config=CFG, features=feats,
                             weights=[1.0, 0.5, 0.5])
    assert three.sc[0] == pytest.approx(two.sc[0], abs=1e-9)
    assert three.sc[1] == three.sc[2]


def test_single_class_expert_warns_and_scores_zero(small_features):
    ann, store, rois = small_features
    gt = [s.gt for s in ann.slices]
    empty = [np.zeros_like(m) for m in gt]
    with pytest.warns(UserWarning, match="single-class"):
        rep = self_consistency(_annotations([gt, empty], [s.image for s in ann.slices]), rois=rois,
                               config=CFG, features=store.matrices(rois))
    assert rep.sc[1] == 0.0 and rep.sc[0] > 0 and rep.warnings


def test_report_json():
    rep = ScReport(["a", "b"], np.array([0.25, 0.5]), 3, 17, 9)
    assert rep.to_json() == {"experts": [{"id": "a", "sc": 0.25}, {"id": "b", "sc": 0.5}],
                             "n_nodes": 17, "n_trees": 3, "seed": 9}
