"""Federated learning over heterogeneous devices with compressed, reduced-precision local models."""

__version__ = "0.1.0"
