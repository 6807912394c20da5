"""Voxel-enhanced affordance segmentation on synthetic shapes, in numpy."""

from .config import TrainConfig
from .errors import VoxAffordError
from .model import VoxAfford, prepare_cloud

__all__ = ["TrainConfig", "VoxAfford", "VoxAffordError", "prepare_cloud"]
__version__ = "0.1.0"
