"""Confidence-weighted multi-view flow fusion with physics-aware layout optimisation."""

__version__ = "0.1.0"
