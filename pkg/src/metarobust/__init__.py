"""Desk-scale laboratory for robust model-agnostic meta-learning."""

__version__ = "0.1.0"
