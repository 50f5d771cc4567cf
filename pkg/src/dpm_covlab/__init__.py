"""Reverse-process covariance estimators for diffusion models, checked against a
Gaussian-mixture oracle."""

__version__ = "0.1.0"
