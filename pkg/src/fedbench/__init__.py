"""Deterministic federated-learning simulation benchmark."""
__version__ = "0.1.0"
