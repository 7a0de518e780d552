"""Joint salient / camouflaged object detection with confidence estimation."""

__version__ = "0.1.0"
