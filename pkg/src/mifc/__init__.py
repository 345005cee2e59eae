"""Multi-input (RGB + silhouette) CNN pipeline for fruit defect classification."""

__version__ = "0.1.0"

from .kernels import BACKEND
from .prng import SplitMix64, prng_next
from .tensor import Tensor, backward, gradient_check, no_grad

__all__ = [
    "BACKEND",
    "SplitMix64",
    "Tensor",
    "__version__",
    "backward",
    "gradient_check",
    "no_grad",
    "prng_next",
]
