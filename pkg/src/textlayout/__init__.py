"""Generative text-layout modelling of synthetic document images."""

__version__ = "0.1.0"
