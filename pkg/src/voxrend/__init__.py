"""voxrend: point-cloud pre-training by differentiable SDF volume rendering.

Point clouds (or multi-view images) are encoded into dense feature
volumes, decoded by SDF/color/semantic fields, composited into
RGB-D(-semantic) pixels, and trained against stored frames with L1
losses.  Everything runs on numpy f64 with a small reverse-mode tape;
runs are deterministic under a single seed.
"""

from .errors import ContractError, DomainError, FormatError
from .geometry import Intrinsics, Pose, Ray, RigidTransform
from .pointcloud import GridSpec, PointCloud
from .volume import ConvParams, DenseVolume, ImageFeatureSet
from .fields import FieldBundle, MlpParams
from .encoder import EncoderParams, SparseFeatures
from .renderer import RaySampleBatch
from .synth import AnalyticScene, Primitive
from .meshing import TriangleMesh
from .training import LossWeights, TrainConfig

__version__ = "0.1.0"

__all__ = [
    "AnalyticScene", "ContractError", "ConvParams", "DenseVolume", "DomainError",
    "EncoderParams", "FieldBundle", "FormatError", "GridSpec", "ImageFeatureSet",
    "Intrinsics", "LossWeights", "MlpParams", "PointCloud", "Pose", "Primitive",
    "Ray", "RaySampleBatch", "RigidTransform", "SparseFeatures", "TrainConfig",
    "TriangleMesh", "__version__",
]
