"""Hybrid dense-convolution / shifted-window transformer leaf-disease classifier."""

__version__ = "0.1.0"
