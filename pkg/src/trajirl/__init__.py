"""Encoder-decoder trajectory prediction regularised by a max-margin reward function."""

__version__ = "0.1.0"
