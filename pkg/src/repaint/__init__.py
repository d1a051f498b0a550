"""Evaluation harness for text-to-image models regenerating reference images."""

__version__ = "0.1.0"
