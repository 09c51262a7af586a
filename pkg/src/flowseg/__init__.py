"""Conditional flow matching for multi-annotator segmentation and aleatoric uncertainty."""

__version__ = "0.1.0"
