"""Distilling generated text supervision into a randomly initialised image classifier."""

__version__ = "0.1.0"
