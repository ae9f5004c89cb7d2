"""Robustness-dataset toolkit for the NAS-Bench-201 cell space."""

__version__ = "0.1.0"
