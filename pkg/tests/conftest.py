import sys
from pathlib import Path

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, str(Path(__file__).parent))

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_bench(tmp_path_factory):
    """Four 64x64 cases with small displacements; one mask withheld in some cases."""
    from consensus_fuse.synthgen import SynthSpec, generate_benchmark

    out = tmp_path_factory.mktemp("small_bench")
    spec = SynthSpec(size=64, displacement=(3.0, 6.0), run_length=8, sigma=0.05)
    generate_benchmark(4, spec, 0.5, 3, out)
    return out / "manifest.json"


@pytest.fixture(scope="session")
def small_features(small_bench):
    from consensus_fuse.core import load_dataset
    from consensus_fuse.pipeline import FeatureStore, rois_of

    ann = load_dataset(small_bench)
    store = FeatureStore(ann)
    return ann, store, rois_of(ann)
