"""Multimodal (SHG/BF) affine image registration."""

from .core import (AffineTransform2D, build_pyramid, compose, invert, tre, warp_affine,
                   warp_landmarks)
from .kernels import BACKEND

__version__ = "0.1.0"
