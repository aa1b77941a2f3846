"""Deterministic discrete-event simulator of a partitioned multikernel."""

__version__ = "0.1.0"
