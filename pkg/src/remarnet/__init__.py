"""Two-branch relation-module and fully connected classifier for small-sample image classification."""

__version__ = "0.1.0"
