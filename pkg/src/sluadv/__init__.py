"""Multilingual joint intent classification and slot filling with language-adversarial training."""

__version__ = "0.1.0"
