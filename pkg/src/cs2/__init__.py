"""Controllable, simultaneous synthesis of CT-like images and segmentation masks."""

__version__ = "0.1.0"
