"""Texture synthesis and evaluation for multispectral images."""

__version__ = "0.1.0"
