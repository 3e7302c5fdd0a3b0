import json

import numpy as np
import pytest
from scipy import ndimage

from consensus_fuse.core import load_dataset
from consensus_fuse.errors import ConsensusError
from consensus_fuse.synthgen import (SHAPES, SynthSpec, generate_benchmark, generate_case, generate_image,
                                     simulate_expert, trace_boundary)

from oracles import dice_loop


def _square(size=128, side=60):
    m = np.zeros((size, size), np.uint8)
    o = (size - side) // 2
    m[o:o + side, o:o + side] = 1
    return m


@pytest.mark.parametrize("shape", SHAPES)
def test_noiseless_image_thresholds_to_mask(shape):
    img, mask = generate_image(SynthSpec(sigma=0.0), np.random.default_rng(1), shape)
    assert len(np.unique(img)) == 2
    np.testing.assert_array_equal((img > 0.45).astype(np.uint8), mask)


def test_foreground_mean_bound():
    for seed in range(20):
        img, mask = generate_image(SynthSpec(sigma=0.05), np.random.default_rng(seed))
        assert mask.sum() >= 400
        assert 0.55 <= img[mask == 1].mean() <= 0.85


def test_low_noise_threshold_recovers_gt():
    for seed in range(10):
        img, mask = generate_image(SynthSpec(sigma=0.05), np.random.default_rng(seed))
        assert dice_loop((img > 0.45).astype(np.uint8), mask) > 0.98


def test_same_seed_same_bytes():
    a = generate_case(SynthSpec(), np.random.SeedSequence(4))
    b = generate_case(SynthSpec(), np.random.SeedSequence(4))
    assert a.image.tobytes() == b.image.tobytes()
    assert all(x.tobytes() == y.tobytes() for x, y in zip(a.experts, b.experts))


def test_zero_displacement_is_identity():
    spec = SynthSpec(displacement=(0.0, 0.0))
    for seed in range(10):
        case = generate_case(spec, np.random.SeedSequence(seed))
        for m in case.experts:
            np.testing.assert_array_equal(m, case.gt)


def test_expert_dice_on_square():
    gt = _square()
    d = [dice_loop(simulate_expert(gt, SynthSpec(), np.random.default_rng(s)), gt) for s in range(100)]
    print(f"expert dice on 60x60 square: min {min(d):.3f} max {max(d):.3f}")
    assert 0.6 < min(d) and max(d) < 0.99


def test_experts_distinct_and_local():
    for seed in range(10):
        case = generate_case(SynthSpec(), np.random.SeedSequence(100 + seed))
        e = case.experts
        assert len({m.tobytes() for m in e}) == 3
        edge = case.gt.astype(bool) ^ ndimage.binary_erosion(case.gt, border_value=0)
        far = ndimage.distance_transform_edt(~edge) > 25
        for m in e:
            assert m.any()
            np.testing.assert_array_equal(m[far], case.gt[far])


def test_trace_is_closed_and_clockwise():
    c = trace_boundary(_square(20, 6))
    assert len(c) == 20
    assert np.abs(c - np.roll(c, 1, axis=0)).max() == 1
    x, y = c[:, 1].astype(float), c[:, 0].astype(float)
    # row axis points down, so a positive shoelace sum is clockwise on screen
    assert np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y) > 0


def test_benchmark_layout_and_counts(tmp_path):
    generate_benchmark(120, SynthSpec(size=64, displacement=(3.0, 6.0), run_length=8), 0.25, 9, tmp_path)
    assert len(list(tmp_path.glob("case_*/image.pgm"))) == 120
    doc = json.loads((tmp_path / "manifest.json").read_text())
    assert len(doc["slices"]) == 120 and doc["experts"] == ["expert_1", "expert_2", "expert_3"]
    ann = load_dataset(tmp_path / "manifest.json")
    n_missing = int(ann.missing_flags().sum())
    assert n_missing == len(list(tmp_path.glob("case_*/withheld_*.pgm")))
    assert 10 < n_missing < 50
    assert ann.missing_flags().sum(axis=1).max() == 1


def test_benchmark_no_missing_and_deterministic(tmp_path):
    spec = SynthSpec(size=64, displacement=(3.0, 6.0), run_length=8)
    generate_benchmark(5, spec, 0.0, 2, tmp_path / "a")
    generate_benchmark(5, spec, 0.0, 2, tmp_path / "b")
    assert not load_dataset(tmp_path / "a" / "manifest.json").missing_flags().any()
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    assert all((tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes() for f in files)


def test_invalid_specs():
    with pytest.raises(ConsensusError):
        SynthSpec(fg_mean=(0.2, 0.5))
    with pytest.raises(ConsensusError) as exc:
        generate_image(SynthSpec(size=32), np.random.default_rng(0), "circle")
    assert exc.value.category == "region-too-large"
    with pytest.raises(ConsensusError):
        generate_benchmark(1, SynthSpec(), 1.0, 0, "/tmp/never")
