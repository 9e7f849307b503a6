"""Mask-guided point-cloud tokenization and two-stage 2D-to-3D distillation."""

__version__ = "0.1.0"
