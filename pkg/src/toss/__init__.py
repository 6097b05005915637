"""Tracking-based LiDAR moving-object segmentation and static map building."""

from .types import BBox, NonFiniteError, PointLabel, Pose, Scan, box_volume, transform_points

__version__ = "0.1.0"

__all__ = [
    "BBox",
    "NonFiniteError",
    "PointLabel",
    "Pose",
    "Scan",
    "box_volume",
    "transform_points",
]
