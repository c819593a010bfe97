"""Hybrid CNN + visual-transformer image classifier with a from-scratch autodiff engine."""

from .config import CnnConfig, FusionConfig, ModelConfig, VtConfig
from .fusion import CvmCervix, build_model, fuse, predict
from .tensor import GradTape, Tensor, backward

__all__ = [
    "CnnConfig", "FusionConfig", "ModelConfig", "VtConfig",
    "CvmCervix", "build_model", "fuse", "predict",
    "GradTape", "Tensor", "backward",
]
__version__ = "0.1.0"
