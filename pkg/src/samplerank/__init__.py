"""Rejection-sample session data toward a goal distribution, then learn to rank on it."""

__version__ = "0.1.0"
