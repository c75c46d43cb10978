"""Dynamic contextual mission data for a simulated team of ground robots."""

__version__ = "0.1.0"
