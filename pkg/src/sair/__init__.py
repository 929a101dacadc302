"""Semantic-aware implicit image representation for inpainting."""

__version__ = "0.1.0"
