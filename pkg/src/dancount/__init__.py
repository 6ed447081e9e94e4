"""Structured density-map crowd counting at desk scale."""

__version__ = "0.1.0"
