"""Rendered test portraits with a known ground-truth pose.

These fixtures exist so the estimator can be tested without shipping any
photographs: the renderer places facial features with the same projection
model the estimator inverts (see :mod:`pose_extractor.geometry`).
"""

import math

from PIL import Image, ImageDraw

from . import geometry

BACKGROUND = (70, 90, 110)
SKIN = (205, 155, 125)
EYE = (25, 22, 22)
MOUTH = (150, 40, 40)


def _ellipse(draw: ImageDraw.ImageDraw, center: tuple[float, float],
             rx: float, ry: float, fill: tuple[int, int, int]) -> None:
    x, y = center
    draw.ellipse((x - rx, y - ry, x + rx, y + ry), fill=fill)


def render_synthetic_portrait(yaw_deg: float = 0.0, pitch_deg: float = 0.0,
                              roll_deg: float = 0.0,
                              size: int = 256) -> Image.Image:
    """A flat-colour head with eyes and mouth at the given pose.

    Head size and placement are fixed; only the feature positions move with
    the pose, exactly as the estimator's projection model predicts.
    """
    image = Image.new("RGB", (size, size), BACKGROUND)
    draw = ImageDraw.Draw(image)

    cx, cy = size / 2.0, size * 0.52
    a, b = size * 0.22, size * 0.30
    box = (cx, cy, a, b)
    _ellipse(draw, (cx, cy), a, b, SKIN)

    yaw = math.radians(yaw_deg)
    pitch = math.radians(pitch_deg)
    roll = math.radians(roll_deg)

    right, left = geometry.eye_points(yaw, pitch, roll, box)
    for point, theta in ((right, yaw - geometry.EYE_HALF_ANGLE),
                         (left, yaw + geometry.EYE_HALF_ANGLE)):
        if abs(theta) >= math.pi / 2:  # eye rotated out of view
            continue
        rx = max(2.0, a * 0.15 * math.cos(theta))
        _ellipse(draw, point, rx, max(2.0, b * 0.07), EYE)

    mouth = geometry.project(yaw, pitch + geometry.MOUTH_ELEVATION, box, roll)
    _ellipse(draw, mouth, max(2.0, a * 0.28 * math.cos(yaw)), b * 0.06, MOUTH)
    return image
