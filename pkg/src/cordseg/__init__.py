"""Spinal-cord segmentation, diffusion-tensor metrics and stenosis statistics
on a small numpy reverse-mode autodiff core."""
from .errors import CordsegError, NonFiniteError, ShapeError, ValidationError
from .model import ModelConfig, SAttisUNet, TrainConfig

__version__ = "0.1.0"
__all__ = ["CordsegError", "NonFiniteError", "ShapeError", "ValidationError", "ModelConfig", "SAttisUNet",
           "TrainConfig", "__version__"]
