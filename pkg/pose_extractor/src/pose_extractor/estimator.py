"""Classical face detection and geometric head-pose estimation.

Detection is skin segmentation in YCrCb (the textbook Cr/Cb box) followed by
connected-component filtering; pose comes from the eye positions inside the
face box via the shared projection model.  No learned models, so results on
photographs are rough; downstream gaze thresholds are configurable to absorb
that.  The pipeline is deterministic.
"""

import math

import numpy as np
from PIL import Image
from scipy import ndimage

from . import geometry

# Skin chroma box (ITU-R BT.601 YCrCb), the classical Chai & Ngan bounds.
CR_RANGE = (133.0, 173.0)
CB_RANGE = (77.0, 127.0)

ANALYSIS_MAX_SIDE = 320
MIN_FACE_AREA_FRAC = 0.005
ASPECT_RANGE = (0.7, 2.0)
MIN_FILL = 0.35
# Eyes are searched in the top portion of the face box only.
EYE_BAND_FRAC = 0.60


def _to_array(image: Image.Image) -> np.ndarray:
    rgb = image.convert("RGB")
    w, h = rgb.size
    scale = max(w, h) / ANALYSIS_MAX_SIDE
    if scale > 1.0:
        rgb = rgb.resize((max(1, round(w / scale)), max(1, round(h / scale))))
    return np.asarray(rgb, dtype=np.float64)


def _skin_mask(rgb: np.ndarray) -> np.ndarray:
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    y = 0.299 * r + 0.587 * g + 0.114 * b
    cr = (r - y) * 0.713 + 128.0
    cb = (b - y) * 0.564 + 128.0
    return ((CR_RANGE[0] <= cr) & (cr <= CR_RANGE[1])
            & (CB_RANGE[0] <= cb) & (cb <= CB_RANGE[1]))


def _luminance(rgb: np.ndarray) -> np.ndarray:
    return 0.299 * rgb[..., 0] + 0.587 * rgb[..., 1] + 0.114 * rgb[..., 2]


def _face_component(mask: np.ndarray) -> tuple[slice, slice] | None:
    """Bounding slices of the largest plausibly face-shaped skin blob."""
    labels, count = ndimage.label(mask)
    if not count:
        return None
    best_area, best = 0, None
    total = mask.shape[0] * mask.shape[1]
    for index, slices in enumerate(ndimage.find_objects(labels), start=1):
        if slices is None:
            continue
        ys, xs = slices
        h, w = ys.stop - ys.start, xs.stop - xs.start
        area = int(np.count_nonzero(labels[slices] == index))
        if area < MIN_FACE_AREA_FRAC * total:
            continue
        if not (ASPECT_RANGE[0] <= h / w <= ASPECT_RANGE[1]):
            continue
        if area / (h * w) < MIN_FILL:
            continue
        if area > best_area:
            best_area, best = area, slices
    return best


def _eye_blobs(luma: np.ndarray, box: tuple[slice, slice],
               ) -> list[tuple[float, float, int]]:
    """Dark-blob centroids (x, y, area) inside the upper face box, image
    coordinates, largest first."""
    ys, xs = box
    band_stop = ys.start + max(1, round((ys.stop - ys.start) * EYE_BAND_FRAC))
    region = luma[ys.start:band_stop, xs.start:xs.stop]
    lo = float(region.min())
    mid = float(np.median(region))
    dark = region < lo + 0.25 * (mid - lo) if mid > lo else np.zeros_like(
        region, dtype=bool)
    labels, count = ndimage.label(dark)
    if not count:
        return []
    blobs = []
    min_area = max(4, round(region.size * 0.0005))
    for index in range(1, count + 1):
        points = np.argwhere(labels == index)
        if len(points) < min_area:
            continue
        cy, cx = points.mean(axis=0)
        blobs.append((float(cx + xs.start), float(cy + ys.start),
                      int(len(points))))
    blobs.sort(key=lambda blob: -blob[2])
    return blobs


def estimate_pose(image: Image.Image) -> dict:
    """Pose annotation dict for one frame (the shared JSON schema).

    No plausible skin blob, or a blob with no eye-like features, reports
    ``face_detected: false``: a featureless patch is more likely an arm or a
    wall than a face.
    """
    rgb = _to_array(image)
    box_slices = _face_component(_skin_mask(rgb))
    if box_slices is None:
        return {"face_detected": False, "face_area_frac": 0.0}

    ys, xs = box_slices
    h, w = ys.stop - ys.start, xs.stop - xs.start
    area_frac = (h * w) / (rgb.shape[0] * rgb.shape[1])
    box = (xs.start + w / 2.0, ys.start + h / 2.0, w / 2.0, h / 2.0)

    blobs = _eye_blobs(_luminance(rgb), box_slices)
    if not blobs:
        return {"face_detected": False, "face_area_frac": 0.0}

    if len(blobs) >= 2 and abs(blobs[0][0] - blobs[1][0]) >= 0.18 * w:
        first, second = sorted(blobs[:2], key=lambda blob: blob[0])
        roll = math.atan2(second[1] - first[1], second[0] - first[0])
        mid = ((first[0] + second[0]) / 2.0, (first[1] + second[1]) / 2.0)
        yaw, pitch = geometry.recover_angles(mid, roll, box)
    else:
        # One visible eye: the far eye has rotated out of view, so the head
        # is strongly turned.  Recover its azimuth and push it outward by
        # the eye half-angle; the eye line is gone, so roll reads 0.
        ex, ey, _ = blobs[0]
        roll = 0.0
        phi = math.asin(max(-1.0, min(1.0, (box[1] - ey) / box[3])))
        pitch = phi - geometry.EYE_ELEVATION
        cos_phi = math.cos(phi)
        sin_theta = (ex - box[0]) / (box[2] * cos_phi) if cos_phi > 1e-6 else 0.0
        theta = math.asin(max(-1.0, min(1.0, sin_theta)))
        sign = 1.0 if theta >= 0 else -1.0
        yaw = theta + sign * geometry.EYE_HALF_ANGLE

    def clamp(angle: float) -> float:
        return max(-180.0, min(180.0, round(math.degrees(angle), 2)))

    return {
        "face_detected": True,
        "yaw_deg": clamp(yaw),
        "pitch_deg": clamp(pitch),
        "roll_deg": clamp(roll),
        "face_area_frac": round(float(area_frac), 4),
    }
