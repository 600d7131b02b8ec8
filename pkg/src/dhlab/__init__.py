"""Discrete heat kernels, functional inequalities and Harnack audits in degenerate random environments."""

__version__ = "0.1.0"
