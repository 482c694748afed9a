"""Coarse-to-fine gaze estimation: face image gives a basic gaze direction,
eye images give an attention-fused residual through a gated two-step head."""

__version__ = "0.1.0"

from .tensor import Tensor, Tape  # noqa: F401
