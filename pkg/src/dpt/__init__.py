"""Dual pseudo training on desk-scale Gaussian-mixture benchmarks."""

__version__ = "0.1.0"
