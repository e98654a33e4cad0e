"""Semantic segmentation with channel and spatial attention, on a small numpy autodiff core."""

__version__ = "0.1.0"
