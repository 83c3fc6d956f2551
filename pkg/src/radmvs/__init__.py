"""Radiometric multi-view stereo for textureless, glossy objects under known illumination."""

__version__ = "0.1.0"
