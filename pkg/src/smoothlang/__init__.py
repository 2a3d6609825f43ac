"""Smooth, differentiable interpretation of WHILE programs and smooth
algorithmic primitives (sorting, median, weighted softmax, finite
differences, iterated function systems)."""

__version__ = "0.1.0"
