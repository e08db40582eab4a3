"""Inverse rendering of shape, reflectance and illumination from a density volume and posed images."""

__version__ = "0.1.0"
