"""Open-set test-time adaptation on a synthetic benchmark."""

__version__ = "0.1.0"
