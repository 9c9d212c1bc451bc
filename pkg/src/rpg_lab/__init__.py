"""Relaxed policy gradient laboratory: policies, environments, estimators and checks."""

__version__ = "0.1.0"
