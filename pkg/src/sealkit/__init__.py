"""Training-free staining and locking of small neural networks."""

__version__ = "0.1.0"
