"""Budgeted gating of an expensive policy behind a cheap imitator."""

__version__ = "0.1.0"
