"""Degradation-conditioned generalizable novel view synthesis at desk scale."""

__version__ = "0.1.0"
