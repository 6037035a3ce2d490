"""Mixture-of-experts gating and adaptive hierarchical feature aggregation heads for scene parsing."""

__version__ = "0.1.0"
