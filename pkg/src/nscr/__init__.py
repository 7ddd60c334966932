"""Auditable classroom-construct reasoning over timestamped symbolic facts."""

__version__ = "0.1.0"
