"""Unified speaker verification: enhancement, multi-scale embeddings and soft VAD."""

__version__ = "0.1.0"
