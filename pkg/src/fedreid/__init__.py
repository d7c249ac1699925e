"""Desk-scale federated person re-identification simulator."""

__version__ = "0.1.0"
