"""Generator for a tiny self-contained demo dataset.

Renders six synthetic episodes' worth of media (two short interaction
videos, one two-person conversation video, one still image) plus pose
annotations and a manifest, so the full harness runs offline with no real
dataset fetch.  Rendering is seeded and pure-numpy, so repeated generation
produces byte-identical files.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
from PIL import Image

from .testset import POSE_FILE_NAME

MINI_MANIFEST_NAME = "manifest.json"

_SIZE = 128


def _render(path: Path, *, seed: int, skin=(224, 172, 138),
            shirt=(60, 90, 160), background=(200, 210, 220),
            detail: float = 0.0, arm_angle_deg: float = -60.0) -> None:
    h = w = _SIZE
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    img = np.zeros((h, w, 3), np.float64)
    for c in range(3):
        img[..., c] = background[c] * (0.75 + 0.25 * yy / h)

    cx, cy, radius = 64, 42, 18
    head = (xx - cx) ** 2 + (yy - cy) ** 2 <= radius * radius
    img[head] = skin
    body = (np.abs(xx - cx) <= 22) & (yy >= 62) & (yy <= 112)
    img[body] = shirt

    angle = np.deg2rad(arm_angle_deg)
    for t in np.linspace(0.0, 34.0, 120):
        ax = int(cx + 22 + t * np.cos(angle))
        ay = int(78 - t * np.sin(angle))
        if 0 <= ax < w - 2 and 0 <= ay < h - 2:
            img[ay:ay + 3, ax:ax + 3] = skin

    if detail > 0:
        # High-frequency noise makes a frame score as sharp.
        rng = np.random.default_rng(seed)
        img = img + rng.integers(-1, 2, size=(h, w, 1)) * detail
    img = np.clip(img, 0, 255).astype(np.uint8)
    Image.fromarray(img).save(path, format="PNG")


def _pose(yaw: float, pitch: float, roll: float = 0.0,
          area: float = 0.04) -> dict:
    return {"face_detected": True, "yaw_deg": yaw, "pitch_deg": pitch,
            "roll_deg": roll, "face_area_frac": area}


def _write_poses(directory: Path, frames: dict[str, dict]) -> None:
    doc = {"version": 1, "frames": frames}
    (directory / POSE_FILE_NAME).write_text(
        json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def generate_mini_dataset(root: str | Path) -> Path:
    """Write the demo media tree plus its manifest under ``root``; returns
    the manifest path."""
    root = Path(root)

    # A person approaching and waving at the camera: the engaged case.
    wave = root / "media" / "jpl" / "wave_vid"
    wave.mkdir(parents=True, exist_ok=True)
    wave_angles = {0: 35.0, 1500: 70.0, 3000: 50.0}
    for t_ms, arm in wave_angles.items():
        _render(wave / f"frame_{t_ms}.png", seed=100 + t_ms,
                detail=12.0, arm_angle_deg=arm)
    _write_poses(wave, {
        "frame_0.png": _pose(5.0, 2.0),
        "frame_1500.png": _pose(-3.0, 1.0),
        "frame_3000.png": _pose(2.0, -4.0),
    })

    # A person walking past without looking: the disengaged case.
    ignore = root / "media" / "jpl" / "ignore_vid"
    ignore.mkdir(parents=True, exist_ok=True)
    for t_ms in (0, 1500, 3000):
        _render(ignore / f"frame_{t_ms}.png", seed=200 + t_ms,
                shirt=(150, 60, 60), detail=10.0, arm_angle_deg=-80.0)
    _write_poses(ignore, {
        "frame_0.png": _pose(85.0, 5.0),
        "frame_1500.png": _pose(80.0, 2.0),
        "frame_3000.png": _pose(88.0, 0.0),
    })

    # Two people in conversation; middle frames are rendered flat so the
    # sharp first/last pair is the admissible selection.
    talk = root / "media" / "egocom" / "talk_vid"
    talk.mkdir(parents=True, exist_ok=True)
    talk_detail = {0: 30.0, 600: 0.0, 1200: 0.0, 1800: 25.0}
    for t_ms, detail in talk_detail.items():
        _render(talk / f"frame_{t_ms}.png", seed=300 + t_ms,
                shirt=(70, 140, 90), detail=detail, arm_angle_deg=-45.0)
    _write_poses(talk, {
        "frame_0.png": _pose(55.0, -5.0),
        "frame_600.png": _pose(52.0, -6.0),
        "frame_1200.png": _pose(58.0, -3.0),
        "frame_1800.png": _pose(54.0, -7.0),
    })

    # A person absorbed in a phone call: the busy still image.
    stanford = root / "media" / "stanford"
    stanford.mkdir(parents=True, exist_ok=True)
    _render(stanford / "phone_img.png", seed=400, shirt=(120, 100, 40),
            detail=8.0, arm_angle_deg=75.0)
    _write_poses(stanford, {"phone_img.png": _pose(-70.0, -15.0)})

    manifest = {
        "version": 1,
        "roots": {
            "jpl": "media/jpl",
            "egocom": "media/egocom",
            "stanford": "media/stanford",
        },
        "media": [
            {"dataset": "jpl", "file_id": "wave_vid", "role": "true_set"},
            {"dataset": "jpl", "file_id": "ignore_vid", "role": "false_set"},
            {"dataset": "egocom", "file_id": "talk_vid", "role": "true_set"},
            {"dataset": "stanford", "file_id": "phone_img",
             "role": "false_set"},
        ],
        "conditions": [
            {"id": "T1",
             "robot_situation": "Help a person if the person needs assistance.",
             "selector": [{"dataset": "jpl", "role": "true_set"},
                          {"dataset": "jpl", "role": "false_set"}]},
            {"id": "T2",
             "robot_situation": "Busy with a task and unable to assist.",
             "selector": [{"dataset": "jpl", "role": "true_set"}]},
            {"id": "T3",
             "robot_situation": "Notify updates to a person.",
             "selector": [{"dataset": "egocom", "role": "true_set"},
                          {"dataset": "stanford", "role": "false_set"}]},
            {"id": "T4",
             "robot_situation": ("Report an urgent warning that must be "
                                 "reported to the person"),
             "selector": [{"dataset": "stanford", "role": "false_set"}]},
        ],
    }
    manifest_path = root / MINI_MANIFEST_NAME
    manifest_path.write_text(json.dumps(manifest, indent=2) + "\n",
                             encoding="utf-8")
    return manifest_path


__all__ = ["generate_mini_dataset", "MINI_MANIFEST_NAME"]
