"""Dataset preparation and evaluation for building-height instance segmentation."""

__version__ = "0.1.0"
