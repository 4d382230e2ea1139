"""Iterative latent refinement for source separation, desk-scale edition."""

__version__ = "0.1.0"

from .diffcore import Tape, Tensor, backward, grad_check  # noqa: F401
