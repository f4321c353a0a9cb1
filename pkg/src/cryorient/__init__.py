"""Orientation recovery for tomographic projections from estimated pairwise distances."""

__version__ = "0.1.0"
