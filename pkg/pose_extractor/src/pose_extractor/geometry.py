"""Shared projection model between the renderer and the estimator.

The head is treated as an ellipsoid whose visible outline is the detected
bounding box.  A facial landmark sitting at azimuth ``theta`` (yaw) and
elevation ``phi`` (pitch) on that ellipsoid projects onto the image at

    x = cx + a * sin(theta) * cos(phi)
    y = cy - b * sin(phi)

with (cx, cy) the box centre and (a, b) its semi-axes.  Eyes sit at
``theta = yaw +- EYE_HALF_ANGLE`` and ``phi = pitch + EYE_ELEVATION``, so a
frontal face has its eye line slightly above centre (the usual ~0.42 height
fraction).  Roll rotates the projected landmarks about the box centre.

Angle conventions (degrees, camera view, image y pointing down):
  - yaw  > 0: head turned toward the person's left (features move image-right)
  - pitch > 0: looking up (features move image-up)
  - roll > 0: head tilted toward the person's left shoulder
"""

import math

# Half the angular separation of the eyes on the head ellipsoid.
EYE_HALF_ANGLE = math.radians(28.0)
# Elevation of the eye line on a frontal face (puts eyes at 0.42 box height).
EYE_ELEVATION = math.asin(0.16)
# Elevation of the mouth on a frontal face.
MOUTH_ELEVATION = -math.asin(0.40)


def project(theta: float, phi: float, box: tuple[float, float, float, float],
            roll: float = 0.0) -> tuple[float, float]:
    """Image position of the landmark at (theta, phi), angles in radians.

    ``box`` is (cx, cy, a, b).  Roll is applied about the box centre.
    """
    cx, cy, a, b = box
    x = a * math.sin(theta) * math.cos(phi)
    y = -b * math.sin(phi)
    if roll:
        cr, sr = math.cos(roll), math.sin(roll)
        x, y = x * cr - y * sr, x * sr + y * cr
    return cx + x, cy + y


def eye_points(yaw: float, pitch: float, roll: float,
               box: tuple[float, float, float, float],
               ) -> tuple[tuple[float, float], tuple[float, float]]:
    """Projected (right eye, left eye) centres, person's-right first
    (image-left on a frontal face).  Angles in radians."""
    phi = pitch + EYE_ELEVATION
    right = project(yaw - EYE_HALF_ANGLE, phi, box, roll)
    left = project(yaw + EYE_HALF_ANGLE, phi, box, roll)
    return right, left


def _clamped_asin(value: float) -> float:
    return math.asin(max(-1.0, min(1.0, value)))


def recover_angles(eye_mid: tuple[float, float], roll: float,
                   box: tuple[float, float, float, float],
                   ) -> tuple[float, float]:
    """Invert :func:`eye_points` given the eye midpoint and the roll already
    measured from the eye line.  Returns (yaw, pitch) in radians.

    The midpoint of the two eyes projects at
    ``x = a * cos(EYE_HALF_ANGLE) * sin(yaw) * cos(phi)``, ``y = -b * sin(phi)``
    (then roll-rotated), so de-rotating and dividing the factors back out
    recovers the angles exactly.
    """
    cx, cy, a, b = box
    x, y = eye_mid[0] - cx, eye_mid[1] - cy
    if roll:
        cr, sr = math.cos(-roll), math.sin(-roll)
        x, y = x * cr - y * sr, x * sr + y * cr
    phi = _clamped_asin(-y / b)
    pitch = phi - EYE_ELEVATION
    cos_phi = math.cos(phi)
    if cos_phi < 1e-6:
        return 0.0, pitch
    yaw = _clamped_asin(x / (a * math.cos(EYE_HALF_ANGLE) * cos_phi))
    return yaw, pitch
