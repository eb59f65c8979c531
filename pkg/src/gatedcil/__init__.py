"""Exemplar-free class-incremental learning with gated class-attention on a small ViT."""

__version__ = "0.1.0"
