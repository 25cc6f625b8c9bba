"""Dual-path error compensation for low-light image enhancement.

A CPU-only implementation: a state-space brightness error estimator,
a frequency-attention denoiser, the training losses and two-stage
driver, image metrics, and a CLI. See README.md for usage.
"""

from .errors import DpecError
from .tensor import Tape, Tensor

__all__ = ["DpecError", "Tape", "Tensor"]
__version__ = "0.1.0"
