"""Condition-number analysis and selective fine-tuning toolkit."""

__version__ = "0.1.0"
