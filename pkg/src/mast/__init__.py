"""Trimodal hierarchical attention summarization on a small float64 autodiff core."""

from .tensor import Tensor, Tape, no_grad, backward, check_gradients

__version__ = "0.1.0"

__all__ = ["Tensor", "Tape", "no_grad", "backward", "check_gradients", "__version__"]
