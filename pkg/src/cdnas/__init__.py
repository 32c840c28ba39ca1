"""Evolutionary multi-objective architecture search for cognitive diagnosis models."""

__version__ = "0.1.0"
