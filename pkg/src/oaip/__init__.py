"""Integer-only Siamese change detection with online filter pruning."""

__version__ = "0.1.0"
