"""Apparent gaze direction and uncertainty from five facial keypoints."""

__version__ = "0.1.0"
