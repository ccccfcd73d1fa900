"""Spectral convolutional networks on tetrahedral meshes."""

__version__ = "0.1.0"
