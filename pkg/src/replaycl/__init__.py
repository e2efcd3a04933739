"""Replay-based continual learning for tabular data."""

__version__ = "0.1.0"
