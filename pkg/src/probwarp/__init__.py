"""Probabilistic warp consistency for dense semantic matching, at desk scale."""

__version__ = "0.1.0"
