"""Turn a directory of frames into a pose annotation file.

The output is the JSON document the evaluation harness reads from beside its
frame files: ``{"version": 1, "frames": {"<name>": {...}}}``.
"""

import json
import logging
from pathlib import Path

from PIL import Image, UnidentifiedImageError

from .estimator import estimate_pose

log = logging.getLogger(__name__)

FRAME_SUFFIXES = (".png", ".jpg", ".jpeg")
DEFAULT_OUT_NAME = "poses.json"


def annotate_frames(frame_dir: str | Path) -> dict:
    """Annotation document for every frame image in ``frame_dir``.

    Undecodable images are recorded as ``face_detected: false`` with a
    warning rather than aborting the run.
    """
    frame_dir = Path(frame_dir)
    if not frame_dir.is_dir():
        raise NotADirectoryError(f"not a frame directory: {frame_dir}")
    frames = {}
    for path in sorted(frame_dir.iterdir()):
        if path.suffix.lower() not in FRAME_SUFFIXES:
            continue
        try:
            with Image.open(path) as image:
                frames[path.name] = estimate_pose(image)
        except (OSError, UnidentifiedImageError) as exc:
            log.warning("cannot decode %s: %s", path, exc)
            frames[path.name] = {"face_detected": False,
                                 "face_area_frac": 0.0}
    return {"version": 1, "frames": frames}


def annotate_directory(frame_dir: str | Path,
                       out: str | Path | None = None) -> Path:
    """Annotate ``frame_dir`` and write the result, returning its path.

    By default the file lands beside the frames as ``poses.json``, where the
    evaluation harness expects it.
    """
    frame_dir = Path(frame_dir)
    doc = annotate_frames(frame_dir)
    out_path = Path(out) if out is not None else frame_dir / DEFAULT_OUT_NAME
    out_path.parent.mkdir(parents=True, exist_ok=True)
    out_path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n",
                        encoding="utf-8")
    return out_path
