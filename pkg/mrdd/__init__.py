"""MRDD - multi-view representation learning with distilled disentangling."""

__version__ = "1.0.0"
