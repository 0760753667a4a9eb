"""Hierarchical criteria decomposition and aggregation for LLM-based text evaluation."""

__version__ = "0.1.0"
