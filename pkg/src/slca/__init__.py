"""Frozen-encoder feature fusion for image classification via spatially localized channel attention."""

__version__ = "0.1.0"
