"""Encoder-decoder image captioning over object feature sequences, with sequential attention."""

__version__ = "0.1.0"
