"""Triplet-guided VAE representations for pixel gridworlds without visual overlap."""

__version__ = "0.1.0"
