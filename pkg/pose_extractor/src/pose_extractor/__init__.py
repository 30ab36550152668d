"""Offline face detection and head-pose annotation for frame directories.

Emits per-frame pose files ({"version": 1, "frames": {...}}) that the
evaluation harness reads beside its frames.  Everything is classical image
processing: no model weights to download, deterministic output.
"""

from .annotate import annotate_directory, annotate_frames
from .estimator import estimate_pose
from .synthetic import render_synthetic_portrait

__all__ = [
    "annotate_directory",
    "annotate_frames",
    "estimate_pose",
    "render_synthetic_portrait",
]
