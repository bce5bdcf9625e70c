"""Introspective robust bundle adjustment on a synthetic stereo world."""

__version__ = "0.1.0"
