"""Interpolation-consistency semi-supervised segmentation."""

__version__ = "0.1.0"
