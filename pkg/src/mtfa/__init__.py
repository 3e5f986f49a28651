"""Multi-scale time-frequency attention for acoustic event detection."""

__version__ = "0.1.0"
