"""Survival prediction with a small vision-language model on CT volumes."""

__version__ = "0.1.0"
