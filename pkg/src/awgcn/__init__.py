"""Markov-chain graphs over call sequences and an attention-aware GCN."""

__version__ = "0.1.0"
