"""Benchmark harness for prediction under missingness shift."""

__version__ = "0.1.0"
