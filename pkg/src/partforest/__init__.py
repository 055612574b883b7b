"""Tree-structured mixture-of-parts pose detection with blob fusion and GP lifting."""

__version__ = "0.1.0"
