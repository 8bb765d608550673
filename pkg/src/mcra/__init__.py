"""Multi-channel power allocation for interference networks."""

__version__ = "0.1.0"
