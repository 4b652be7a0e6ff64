"""Preserve-and-steer post-training for flow-matching action policies, with a toy lock-in benchmark."""

__version__ = "0.1.0"
