"""Joint-nullspace discriminant head with a small trainable feature extractor."""

__version__ = "0.1.0"
