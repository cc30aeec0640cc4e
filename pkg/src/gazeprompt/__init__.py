"""Gaze-overlaid visual prompting for attention detection on lecture videos."""

__version__ = "0.1.0"
