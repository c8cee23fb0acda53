"""Adversarial hard-negative training for multimodal entity linking on precomputed features."""

__version__ = "0.1.0"
