"""Deterministic in-process simulator for byzantine-robust federated learning."""

__version__ = "0.1.0"
