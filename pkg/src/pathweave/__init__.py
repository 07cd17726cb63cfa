"""Desk-scale modality-incremental continual learning with adapter-in-adapter paths."""

__version__ = "0.1.0"
