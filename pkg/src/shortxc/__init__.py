"""Short-text extreme multi-label classification with embedding-axis convolutions."""

__version__ = "0.1.0"
