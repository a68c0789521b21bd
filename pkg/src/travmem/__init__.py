"""Continual traversability learning with a scene-aware replay memory."""

__version__ = "0.1.0"
