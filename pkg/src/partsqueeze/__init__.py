"""Self-supervised object part segmentation via a squeeze-and-expand
appearance bottleneck, trained on geometrically paired images."""

__version__ = "0.1.0"

from .bottleneck import (
    ModelDims,
    PartCenters,
    append_coordinate_channels,
    expand,
    normalize_channels,
    part_centers,
    squeeze,
)
from .losses import (
    ArcFaceConfig,
    LayerWeights,
    LossReport,
    LossWeights,
    arcface_loss,
    background_concentration,
    boundary_distance,
    foreground_concentration,
    perceptual_loss,
    total_loss,
)
from .tps import ImagePair, TPSConfig, TPSParams, make_pair, sample_tps, warp

__all__ = [
    "ModelDims",
    "PartCenters",
    "append_coordinate_channels",
    "expand",
    "normalize_channels",
    "part_centers",
    "squeeze",
    "ArcFaceConfig",
    "LayerWeights",
    "LossReport",
    "LossWeights",
    "arcface_loss",
    "background_concentration",
    "boundary_distance",
    "foreground_concentration",
    "perceptual_loss",
    "total_loss",
    "ImagePair",
    "TPSConfig",
    "TPSParams",
    "make_pair",
    "sample_tps",
    "warp",
]
