"""Closed-loop moral-consistency evaluation of language models."""
__version__ = "0.1.0"
