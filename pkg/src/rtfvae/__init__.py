"""Manifold-learning enhancement of relative transfer function estimates."""

__version__ = "0.1.0"
