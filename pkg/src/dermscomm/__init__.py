"""Primal-dual DERMS co-simulation with communication fault injection."""

__version__ = "0.1.0"
