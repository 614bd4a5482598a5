"""Strawberry mass from a segmentation mask and an aligned depth map."""

__version__ = "0.1.0"
