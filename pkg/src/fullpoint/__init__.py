"""Full point encoding layers on a small numpy autodiff engine."""

from .cloud import PointCloud, farthest_point_sample, knn, voxel_downsample
from .network import NetworkSpec, build_network, load_checkpoint, save_checkpoint
from .rng import Rng
from .tensor import Tensor, backward, grad_check

__version__ = "0.1.0"

__all__ = [
    "NetworkSpec",
    "PointCloud",
    "Rng",
    "Tensor",
    "backward",
    "build_network",
    "farthest_point_sample",
    "grad_check",
    "knn",
    "load_checkpoint",
    "save_checkpoint",
    "voxel_downsample",
]
