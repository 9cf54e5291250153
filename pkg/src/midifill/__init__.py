"""Multitrack MIDI infilling: corpus cleaning, tokenization, dataset building and evaluation."""

__version__ = "0.1.0"
