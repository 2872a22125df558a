"""Personalized federated learning with additive full-rank + low-rank weight decomposition."""

__version__ = "0.1.0"
