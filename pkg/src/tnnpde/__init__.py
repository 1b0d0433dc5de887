"""Tensor neural network solvers for high-dimensional elliptic problems."""

__version__ = "0.1.0"
