"""Transport-equation toolkit on convex planar domains (development stub)."""

__version__ = "0.1.0"
