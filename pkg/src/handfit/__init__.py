"""Hand pose and shape fitting from depth and dense correspondences."""

__version__ = "0.1.0"
