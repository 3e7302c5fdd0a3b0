"""Consensus segmentation from multiple expert masks.

Missing annotations are imputed with a semi-supervised forest, each expert is
scored for self-consistency against image features, and the consensus is the
exact minimiser of a pairwise MRF energy found by graph cut.
"""
__version__ = "0.1.0"

from .core import AnnotationSet, Roi, compute_roi, load_dataset, write_mask
from .errors import ConsensusError
from .forest import ForestConfig, impute_missing, train_ssl, train_supervised
from .fusion import FusionConfig, fuse, majority_vote

__all__ = [
    "AnnotationSet", "Roi", "compute_roi", "load_dataset", "write_mask", "ConsensusError",
    "ForestConfig", "impute_missing", "train_ssl", "train_supervised",
    "FusionConfig", "fuse", "majority_vote", "__version__",
]
