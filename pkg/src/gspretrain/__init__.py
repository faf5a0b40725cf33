"""Self-supervised pre-training with ray-anchored 3D Gaussians decoded from a voxel grid."""

from .config import TrainConfig, fixture_config, reference_config
from .errors import GSPretrainError

__version__ = "0.1.0"

__all__ = ["TrainConfig", "fixture_config", "reference_config", "GSPretrainError", "__version__"]
