"""Skeleton action generation with self-attention graph convolutions."""

__version__ = "0.1.0"
