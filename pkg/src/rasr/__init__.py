"""Retrieval-augmented multimodal fake-news-video classification engine."""

__version__ = "0.1.0"
