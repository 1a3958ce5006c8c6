"""Logical anomaly detection with composition maps, local appearance and global class statistics."""

__version__ = "0.1.0"
