"""Outlier-robust amortised simulation-based inference via neural score matching."""

__version__ = "0.1.0"
