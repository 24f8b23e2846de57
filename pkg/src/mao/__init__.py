"""Prompt tuning engine for frozen dual encoders on synthetic benchmarks."""

__version__ = "0.1.0"
