"""Map-based automatic data labeling for drivable areas and curbs."""

__version__ = "0.1.0"
