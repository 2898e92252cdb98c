"""Dual-channel attention hypergraph network for query-item link prediction."""

__version__ = "0.1.0"
