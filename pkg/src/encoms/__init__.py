"""Process-level energy monitoring and energy-driven adaptation."""

__version__ = "0.1.0"
