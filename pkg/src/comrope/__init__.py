"""Rotary position encodings parameterised by trainable angle matrices."""

__version__ = "0.1.0"
