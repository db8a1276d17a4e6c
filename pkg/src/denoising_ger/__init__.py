"""Desk-scale noise-robust generative error correction for speech recognition."""

__version__ = "0.1.0"
