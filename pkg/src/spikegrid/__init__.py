"""Event-driven neuromorphic edge controllers for AC power-electronic converters."""

__version__ = "0.1.0"
