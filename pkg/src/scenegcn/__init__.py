"""Vehicle behaviour classification over temporal interaction graphs."""

__version__ = "0.1.0"
