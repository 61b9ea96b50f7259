"""Tokenizer-free tagging and dependency parsing with a character-level transformer."""

__version__ = "0.1.0"
