"""Siamese attention matching of variable-length image sequences."""

__version__ = "0.1.0"
