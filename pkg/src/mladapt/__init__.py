"""Desk-scale multilingual CTC training toolkit."""

__version__ = "0.1.0"
