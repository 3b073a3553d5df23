"""Weakly supervised cross-resolution segmentation with a frozen diffusion prior and a transformer branch."""

__version__ = "0.1.0"
