"""Memory retention analyses and multi-offset semantic decoding."""

__version__ = "0.1.0"
