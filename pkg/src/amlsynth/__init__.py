"""Synthetic transaction-graph generator with adversarially hardened laundering clusters."""

__version__ = "0.1.0"
