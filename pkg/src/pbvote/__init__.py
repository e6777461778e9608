"""Robust Gaussian majority votes with averaged-risk certificates."""

__version__ = "0.1.0"

from .backend import active_backend, available_backends

__all__ = ["active_backend", "available_backends", "__version__"]
