"""Sparse-sampling question answering over long interleaved documents."""

__version__ = "0.1.0"
