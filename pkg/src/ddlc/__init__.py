"""Discriminative dictionary learning and classification for descriptor bags."""

__version__ = "0.1.0"
