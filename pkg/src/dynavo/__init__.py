"""Sparse RGB-D visual odometry for dynamic scenes.

Rejects features on moving objects two ways: depth-cluster reprojection-error
analysis every frame, and semantic mask filtering on keyframes only.
"""

__version__ = "0.1.0"

from .geometry import CameraIntrinsics, Pose  # noqa: F401
