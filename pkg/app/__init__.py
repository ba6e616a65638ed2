"""Application module."""
