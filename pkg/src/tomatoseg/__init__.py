"""Convolutional-transformer semantic segmentation for tomato ripeness grading."""

__version__ = "0.1.0"
