"""Carrier- and LO-free phase-retrieval optical receiver simulator."""

__version__ = "0.1.0"
