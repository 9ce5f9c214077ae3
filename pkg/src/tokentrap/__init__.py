"""Trap-word adversarial dataset toolkit for subword tokenizers."""

__version__ = "0.1.0"
