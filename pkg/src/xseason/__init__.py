"""Cross-season 2D-2D correspondence generation and correspondence losses."""

__version__ = "0.1.0"
