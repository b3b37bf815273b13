"""Federated learning over a simulated multi-hop wireless mesh with Q-routing."""

__version__ = "0.1.0"
