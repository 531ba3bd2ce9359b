"""Background-aware generalized few-shot semantic segmentation of LiDAR range images."""

__version__ = "0.1.0"
