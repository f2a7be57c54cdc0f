"""Stepwise variational inference with truncated D-vine copulas."""

__version__ = "0.1.0"
