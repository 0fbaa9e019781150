"""Toy long-context transformer with summarization-token KV-cache compression."""

__version__ = "0.1.0"
