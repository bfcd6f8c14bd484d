"""Explainable few-shot classification with a pattern extractor and pairwise matching."""

__version__ = "0.1.0"
