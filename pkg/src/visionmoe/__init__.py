"""Sparse mixture-of-experts layers for ViT and ConvNeXt image classifiers."""

from .tensor import Tensor, backward, get_precision, parameter, set_precision

__version__ = "0.1.0"

__all__ = ["Tensor", "backward", "get_precision", "parameter", "set_precision", "__version__"]
