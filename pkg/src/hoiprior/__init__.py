"""Generative hand-object interaction prior at desk scale."""

__version__ = "0.1.0"
