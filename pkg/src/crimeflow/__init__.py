"""Spatial panel and machine-learning forecasts of areal crime counts."""

__version__ = "0.1.0"
