"""One-shot test-time adaptive detection on synthetic scenes."""

__version__ = "0.1.0"
