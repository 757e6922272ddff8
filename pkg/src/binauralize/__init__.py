"""Mono-to-binaural audio spatialization with audio-visual consistency training."""

__version__ = "0.1.0"
