"""Targeted adversarial attacks on small vision-and-language models."""

__version__ = "0.1.0"
