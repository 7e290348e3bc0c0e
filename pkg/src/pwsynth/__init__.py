"""Pose-guided person image synthesis with UV-space coordinate completion."""

__version__ = "0.1.0"
