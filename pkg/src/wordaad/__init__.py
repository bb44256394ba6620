"""Single-word auditory attention decoding on EEG epochs."""

__version__ = "0.1.0"
