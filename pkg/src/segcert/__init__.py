"""Lipschitz-based worst-case robustness certificates for semantic segmentation."""

__version__ = "0.1.0"
