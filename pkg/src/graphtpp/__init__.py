"""Graph-aware neural temporal point process for user-item interaction streams."""

__version__ = "0.1.0"
