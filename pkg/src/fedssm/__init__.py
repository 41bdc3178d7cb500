"""Federated Adam with a shared sparse mask, its baselines and diagnostics."""

__version__ = "0.1.0"
