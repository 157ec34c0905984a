"""Lighting-robust tiny CNNs for line-following vehicles, at desk scale."""

__version__ = "0.1.0"
