"""Composed person retrieval: dual-encoder fine-tuning, textual inversion
networks, pseudo-word query composition, evaluation and dataset curation."""

__version__ = "0.1.0"
