"""Unsupervised video anomaly detection with conditional diffusion on
clip-level features."""

__version__ = "0.1.0"
