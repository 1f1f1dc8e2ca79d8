"""Trans-spatial attention U-Net blocks, losses and metrics for volumetric segmentation."""
from . import ops
from .tensor import ConfigError, ShapeError, Tape, Tensor, UsageError, backward, tensor

__version__ = "0.1.0"

__all__ = ["ConfigError", "ShapeError", "Tape", "Tensor", "UsageError", "backward", "ops", "tensor"]
