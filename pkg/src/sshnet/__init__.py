"""Desk-scale image-sentence retrieval with semantic-spatial feature enhancement."""

__version__ = "0.1.0"
