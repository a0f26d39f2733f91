"""Deterministic federated retrieval over text, knowledge-graph and relational clients."""

__version__ = "0.1.0"
