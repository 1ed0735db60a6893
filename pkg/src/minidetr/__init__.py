"""Toy-scale DETR and a robustness harness built on a small numpy autodiff engine."""

__version__ = "0.1.0"
