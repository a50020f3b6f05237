"""Dynamic smooth label assignment for anchor-free detectors."""

__version__ = "0.1.0"
