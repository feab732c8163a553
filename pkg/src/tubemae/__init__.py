"""Masked spatiotemporal video pre-training with image-level feature distillation."""

__version__ = "0.1.0"
