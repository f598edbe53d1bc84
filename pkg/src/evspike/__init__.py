"""Event-based neural spike detection for delta-modulating frontends."""
__version__ = "0.1.0"
