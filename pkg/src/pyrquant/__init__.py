"""Pyramid pooling + partial-attention product quantization for fine-grained retrieval."""

__version__ = "0.1.0"
