"""Streaming session-based recommendation with a global-attributed graph network."""

__version__ = "0.1.0"
