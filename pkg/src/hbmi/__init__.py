"""Hierarchical EEG/EMG gesture decoding with context-aware MAP inference."""

__version__ = "0.1.0"
