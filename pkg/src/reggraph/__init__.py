"""Tree-structured regularizers built from linear operators and convex functionals."""

__version__ = "0.1.0"
