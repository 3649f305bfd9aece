"""Bi-modal prompt learning over frozen vision-language backbones."""

__version__ = "0.1.0"
