"""Deterministic desk-scale simulator of differentially private federated
learning with server-side gradient conflict correction."""

__version__ = "0.1.0"
