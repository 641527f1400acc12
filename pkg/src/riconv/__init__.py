"""Rotation-invariant point-cloud convolution built on numpy."""

from .geometry import PointCloud, RigidTransform, load_point_cloud, save_point_cloud
from .irif import FULL_MASK, IRIF_COLUMNS, MODEL_MASKS, FeatureMask, compute_irif
from .lra import compute_lra, local_axis
from .model import (
    NetworkConfig,
    build_classifier,
    build_network,
    build_segmenter,
    desk_classifier,
    desk_segmenter,
    riconvpp_operator,
    full_classifier,
    full_segmenter,
)

__version__ = "0.1.0"

__all__ = [
    "FULL_MASK", "IRIF_COLUMNS", "MODEL_MASKS", "FeatureMask", "NetworkConfig", "PointCloud",
    "RigidTransform", "build_classifier", "build_network", "build_segmenter", "compute_irif",
    "compute_lra", "desk_classifier", "desk_segmenter", "load_point_cloud", "local_axis",
    "riconvpp_operator", "save_point_cloud", "full_classifier", "full_segmenter",
]
