"""Desk-scale continual-learning laboratory.

A tiny vision transformer pretrained in-repo on synthetic data, a
parameter-extensible adapter method that learns task streams in a single
forward pass, the baselines it is measured against, and the full metric
and artifact plumbing. Everything runs on numpy with a small reverse-mode
autodiff core; runs are deterministic down to artifact bytes.
"""

from .errors import (CapacityError, ConfigError, ProtocolError, ShapeError,
                     TrainingError)
from .tensor import RngStream, Tensor

__all__ = [
    "CapacityError",
    "ConfigError",
    "ProtocolError",
    "RngStream",
    "ShapeError",
    "Tensor",
    "TrainingError",
]
