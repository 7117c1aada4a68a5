"""Object-level multi-server model sharing for building information models."""

__version__ = "0.1.0"
