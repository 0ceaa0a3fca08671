"""Streaming anomaly detection over coupled presenter/audience feature streams."""

__version__ = "0.1.0"
