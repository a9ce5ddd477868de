"""Iterative planning-and-retrieval pipeline for research-proposal generation."""

__version__ = "0.1.0"
