"""Ordinal-aware GNN matrix completion via cumulative preference propagation."""

__version__ = "0.1.0"
