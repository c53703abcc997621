"""Route ranking by predicted deviation rate."""

__version__ = "0.1.0"
