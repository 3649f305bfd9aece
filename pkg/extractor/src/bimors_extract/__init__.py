"""Offline frozen-backbone exporter for the prompt-learning pipeline."""

__version__ = "0.1.0"
