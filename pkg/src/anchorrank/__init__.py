"""Hyperlink-derived pseudo query/document pre-training and reranking toolkit."""

__version__ = "0.1.0"
