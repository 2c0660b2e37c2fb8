"""Multi-task volumetric segmentation with a dynamically generated head."""

from .tensor import Tape, Tensor, backward

__all__ = ["Tape", "Tensor", "backward"]
__version__ = "0.1.0"
