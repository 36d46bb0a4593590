"""Cascaded anisotropic convolutional networks for hierarchical 3D segmentation."""

__version__ = "0.1.0"
