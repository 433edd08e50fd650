"""Radiographic layer separation, pseudo-image construction, and joint-space synthesis."""

__version__ = "0.1.0"
