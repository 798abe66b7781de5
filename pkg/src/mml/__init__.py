"""Modular BEV perception models trained with round-based weight merging."""

__version__ = "0.1.0"
