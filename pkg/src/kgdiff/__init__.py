"""Generative multimodal knowledge-graph completion on a small numpy stack."""

__version__ = "0.1.0"
