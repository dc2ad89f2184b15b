"""Sink-centric fuzzing over the MiniJ target language."""

__version__ = "0.1.0"
