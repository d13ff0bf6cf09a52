"""Recurrent convolutional classifiers for noisy image sequences."""

from .tensor import Tensor, ShapeError, no_grad, set_default_dtype, get_default_dtype

__all__ = [
    "Tensor",
    "ShapeError",
    "no_grad",
    "set_default_dtype",
    "get_default_dtype",
]
