"""Decompose object-centric VideoQA questions into four chained sub-tasks and evaluate VideoLLMs on them."""

__version__ = "0.1.0"
