"""Reconstruction of the 84-situation evaluation protocol.

A manifest names the media files each test condition draws on; expansion
crosses conditions with their media selectors to produce episodes.  Videos
are consumed as pre-decoded frame directories (``frame_{t_ms}.png``) so the
library never links a codec stack: interaction videos are sampled on a fixed
1.5 s grid, conversation videos contribute their two sharpest frames, and
still images are single observations.  Missing media never aborts expansion;
the affected episodes are marked unavailable with a warning.
"""

from __future__ import annotations

import json
import re
from bisect import bisect_right
from dataclasses import dataclass
from importlib import resources
from io import BytesIO
from pathlib import Path
from typing import Iterable, Sequence

import jsonschema
import numpy as np
from PIL import Image, UnidentifiedImageError

from .domain import (
    Episode,
    Observation,
    PoseAnnotation,
    RobotSituation,
    frame_ref_for_bytes,
)

DEFAULT_INTERVAL_S = 1.5
MIN_PAIR_SPACING_S = 0.75
POSE_FILE_NAME = "poses.json"
FRAME_NAME = re.compile(r"^frame_(\d+)\.png$")
IMAGE_EXTENSIONS = (".jpg", ".jpeg", ".png")

CONDITION_IDS = ("T1", "T2", "T2'", "T3", "T4", "T3'", "T3''")

# Conditions with an unlabeled outcome: the robot's own task competes with
# the human (T2') or the set is open-ended by design (T3', T3'').
_OPEN_CONDITIONS = frozenset({"T2'", "T3'", "T3''"})
_RUBRIC_BY_ID = {"T1": "assist", "T2": "assist", "T2'": "assist",
                 "T3": "speak", "T4": "speak", "T3'": "speak", "T3''": "speak"}
_EXPECTATION_BY_ID = {"T1": "expect_agree", "T2": "expect_decline",
                      "T2'": "open", "T3": "expect_agree", "T4": "expect_agree",
                      "T3'": "open", "T3''": "open"}
_URGENCY_BY_ID = {"T1": "none", "T2": "busy", "T2'": "urgent", "T3": "none",
                  "T4": "urgent", "T3'": "none", "T3''": "none"}

_ROLE_SUFFIX = {"true_set": "true", "false_set": "false", "open_ended": "open"}

_DATASET_KINDS = {"jpl": "video", "egocom": "video_pair", "stanford": "image"}


class ManifestError(Exception):
    """Fatal manifest problem, message prefixed with the offending field path."""


class PoseFileError(Exception):
    pass


MANIFEST_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "required": ["version", "roots", "media", "conditions"],
    "additionalProperties": False,
    "properties": {
        "version": {"const": 1},
        "roots": {
            "type": "object",
            "required": ["jpl", "egocom", "stanford"],
            "additionalProperties": False,
            "properties": {
                "jpl": {"type": "string", "minLength": 1},
                "egocom": {"type": "string", "minLength": 1},
                "stanford": {"type": "string", "minLength": 1},
            },
        },
        "media": {
            "type": "array",
            "minItems": 1,
            "items": {
                "type": "object",
                "required": ["dataset", "file_id", "role"],
                "additionalProperties": False,
                "properties": {
                    "dataset": {"enum": ["jpl", "egocom", "stanford"]},
                    "file_id": {"type": "string", "minLength": 1},
                    "role": {"enum": ["true_set", "false_set", "open_ended"]},
                    "segment": {
                        "type": "object",
                        "oneOf": [
                            {
                                "required": ["half"],
                                "additionalProperties": False,
                                "properties": {
                                    "half": {"enum": ["first", "second"]}
                                },
                            },
                            {
                                "required": ["start_s", "end_s"],
                                "additionalProperties": False,
                                "properties": {
                                    "start_s": {"type": "number", "minimum": 0},
                                    "end_s": {"type": "number",
                                              "exclusiveMinimum": 0},
                                },
                            },
                        ],
                    },
                },
            },
        },
        "conditions": {
            "type": "array",
            "minItems": 1,
            "items": {
                "type": "object",
                "required": ["id", "robot_situation", "selector"],
                "additionalProperties": False,
                "properties": {
                    "id": {"enum": list(CONDITION_IDS)},
                    "robot_situation": {"type": "string", "minLength": 1},
                    "selector": {
                        "type": "array",
                        "minItems": 1,
                        "items": {
                            "type": "object",
                            "required": ["dataset", "role"],
                            "additionalProperties": False,
                            "properties": {
                                "dataset": {"enum": ["jpl", "egocom",
                                                     "stanford"]},
                                "role": {"enum": ["true_set", "false_set",
                                                  "open_ended"]},
                            },
                        },
                    },
                },
            },
        },
    },
}


@dataclass(frozen=True)
class Segment:
    """A sub-window of a video: a duration half or an explicit time range."""

    half: str | None = None
    start_s: float | None = None
    end_s: float | None = None

    def __post_init__(self) -> None:
        explicit = self.start_s is not None or self.end_s is not None
        if (self.half is None) == (not explicit):
            raise ValueError("segment needs either a half or a start/end range")
        if self.half is not None and self.half not in ("first", "second"):
            raise ValueError("half must be 'first' or 'second'")
        if explicit:
            if self.start_s is None or self.end_s is None:
                raise ValueError("explicit segments need both start_s and end_s")
            if self.start_s < 0 or self.end_s <= self.start_s:
                raise ValueError("segment range must satisfy 0 <= start < end")

    def label(self) -> str:
        if self.half is not None:
            return f"{self.half}-half"
        return f"{self.start_s:g}-{self.end_s:g}s"

    def resolve(self, duration_s: float) -> tuple[float, float]:
        """Concrete (start, end) window in video-absolute seconds."""
        if self.half is not None:
            mid = duration_s / 2.0
            return (0.0, mid) if self.half == "first" else (mid, duration_s)
        return (self.start_s, min(self.end_s, duration_s))  # type: ignore[return-value]

    def to_dict(self) -> dict:
        if self.half is not None:
            return {"half": self.half}
        return {"start_s": self.start_s, "end_s": self.end_s}

    @classmethod
    def from_dict(cls, d: dict) -> "Segment":
        if "half" in d:
            return cls(half=d["half"])
        return cls(start_s=float(d["start_s"]), end_s=float(d["end_s"]))


@dataclass(frozen=True)
class MediaEntry:
    dataset: str
    file_id: str
    role: str
    segment: Segment | None = None

    @property
    def kind(self) -> str:
        return _DATASET_KINDS[self.dataset]


@dataclass(frozen=True)
class TestCondition:
    """One row of the protocol: a robot situation applied to a media slice."""

    id: str
    robot_situation: RobotSituation
    selector: tuple[tuple[str, str], ...]  # (dataset, role) pairs

    def __post_init__(self) -> None:
        if self.id not in CONDITION_IDS:
            raise ValueError(f"unknown condition id {self.id!r}")

    @property
    def expectation(self) -> str:
        return _EXPECTATION_BY_ID[self.id]

    @property
    def rubric(self) -> str:
        return _RUBRIC_BY_ID[self.id]


@dataclass(frozen=True)
class TestManifest:
    version: int
    roots: dict[str, Path]
    media: tuple[MediaEntry, ...]
    conditions: tuple[TestCondition, ...]
    warnings: tuple[str, ...] = ()

    def media_for(self, dataset: str, role: str) -> tuple[MediaEntry, ...]:
        return tuple(m for m in self.media
                     if m.dataset == dataset and m.role == role)

    def condition(self, condition_id: str) -> TestCondition:
        for cond in self.conditions:
            if cond.id == condition_id:
                return cond
        raise KeyError(condition_id)


def default_manifest_path() -> Path:
    return Path(str(resources.files("overture.data") / "default_manifest.json"))


def _schema_check(doc: object) -> None:
    validator = jsonschema.Draft202012Validator(MANIFEST_SCHEMA)
    errors = sorted(validator.iter_errors(doc), key=lambda e: list(e.absolute_path))
    if errors:
        best = jsonschema.exceptions.best_match(errors)
        raise ManifestError(f"{best.json_path}: {best.message}")


def load_manifest(path: str | Path) -> TestManifest:
    """Load and validate a manifest file.

    Schema violations are fatal; missing dataset roots or media files only
    produce warnings, since expansion degrades per episode.  Relative roots
    resolve against the manifest's own directory, keeping dataset trees
    relocatable.
    """
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ManifestError(f"manifest not found: {path}")
    except json.JSONDecodeError as exc:
        raise ManifestError(f"manifest is not valid JSON: {exc}")
    _schema_check(doc)

    base = path.parent
    roots = {name: (Path(raw) if Path(raw).is_absolute() else base / raw)
             for name, raw in doc["roots"].items()}

    media = []
    for i, m in enumerate(doc["media"]):
        try:
            segment = Segment.from_dict(m["segment"]) if "segment" in m else None
        except ValueError as exc:
            raise ManifestError(f"$.media[{i}].segment: {exc}")
        media.append(MediaEntry(dataset=m["dataset"], file_id=m["file_id"],
                                role=m["role"], segment=segment))

    conditions = []
    seen_ids: set[str] = set()
    for i, c in enumerate(doc["conditions"]):
        if c["id"] in seen_ids:
            raise ManifestError(f"$.conditions[{i}].id: duplicate {c['id']!r}")
        seen_ids.add(c["id"])
        conditions.append(TestCondition(
            id=c["id"],
            robot_situation=RobotSituation(
                text=c["robot_situation"],
                urgency_hint=_URGENCY_BY_ID[c["id"]]),
            selector=tuple((s["dataset"], s["role"]) for s in c["selector"]),
        ))

    warnings = []
    for name in ("jpl", "egocom", "stanford"):
        if not roots[name].is_dir():
            warnings.append(f"dataset root missing: {name} ({roots[name]})")
    for entry in media:
        if _media_path(roots, entry) is None:
            warnings.append(
                f"media missing: {entry.dataset}/{entry.file_id}")

    return TestManifest(version=doc["version"], roots=roots,
                        media=tuple(media), conditions=tuple(conditions),
                        warnings=tuple(warnings))


def _media_path(roots: dict[str, Path], entry: MediaEntry) -> Path | None:
    """Where the entry's frames live, or None when absent."""
    root = roots[entry.dataset]
    if entry.kind == "image":
        for ext in IMAGE_EXTENSIONS:
            candidate = root / f"{entry.file_id}{ext}"
            if candidate.is_file():
                return candidate
        return None
    frame_dir = root / entry.file_id
    return frame_dir if frame_dir.is_dir() else None


def load_pose_annotations(path: str | Path) -> dict[str, PoseAnnotation]:
    """Parse a per-frame pose annotation file ({"version": 1, "frames": {...}})."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise PoseFileError(f"unreadable pose file {path}: {exc}")
    if not isinstance(doc, dict) or doc.get("version") != 1 \
            or not isinstance(doc.get("frames"), dict):
        raise PoseFileError(
            f"pose file {path} must be {{'version': 1, 'frames': {{...}}}}")
    poses = {}
    for name, raw in doc["frames"].items():
        try:
            poses[name] = PoseAnnotation.from_dict(raw)
        except (KeyError, TypeError, ValueError) as exc:
            raise PoseFileError(f"pose file {path}, frame {name!r}: {exc}")
    return poses


def _poses_beside(path: Path) -> tuple[dict[str, PoseAnnotation], list[str]]:
    """Pose annotations for the directory containing ``path`` (or the
    directory itself), plus warnings when the file is broken or absent."""
    directory = path if path.is_dir() else path.parent
    pose_path = directory / POSE_FILE_NAME
    if not pose_path.is_file():
        return {}, [f"no pose annotation file in {directory}"]
    try:
        return load_pose_annotations(pose_path), []
    except PoseFileError as exc:
        return {}, [str(exc)]


def list_frame_files(frame_dir: str | Path) -> list[tuple[int, Path]]:
    """(t_ms, path) for every decoded frame, ordered by timestamp."""
    frame_dir = Path(frame_dir)
    frames = []
    for child in frame_dir.iterdir():
        match = FRAME_NAME.match(child.name)
        if match and child.is_file():
            frames.append((int(match.group(1)), child))
    frames.sort(key=lambda pair: pair[0])
    return frames


def _observe(path: Path, timestamp_s: float,
             poses: dict[str, PoseAnnotation],
             ref_cache: dict[Path, str] | None = None) -> Observation:
    if ref_cache is not None and path in ref_cache:
        ref = ref_cache[path]
    else:
        ref = frame_ref_for_bytes(path.read_bytes())
        if ref_cache is not None:
            ref_cache[path] = ref
    return Observation(frame_ref=ref, timestamp_s=timestamp_s,
                       pose=poses.get(path.name), source_path=str(path))


def extract_frames(frame_dir: str | Path, segment: Segment | None = None,
                   interval_s: float = DEFAULT_INTERVAL_S) -> list[Observation]:
    """Sample a decoded video on a fixed grid: one observation every
    ``interval_s`` seconds from the segment start, while the grid time stays
    within the segment (end inclusive).

    Timestamps are video-absolute, so the second half of a 20 s video starts
    at 10.0.  Each grid time maps to the latest frame at or before it.
    """
    if interval_s <= 0:
        raise ValueError("interval_s must be positive")
    frames = list_frame_files(frame_dir)
    if not frames:
        raise ValueError(f"no frames in {frame_dir}")
    duration_s = frames[-1][0] / 1000.0

    if segment is None:
        start, end = 0.0, duration_s
    else:
        start, end = segment.resolve(duration_s)
    if end - start <= 0:
        raise ValueError(f"empty segment [{start}, {end}] in {frame_dir}")

    times = [t for t, _ in frames]
    poses, _ = _poses_beside(Path(frame_dir))
    ref_cache: dict[Path, str] = {}

    observations = []
    k = 0
    while True:
        tick = start + k * interval_s
        if tick > end + 1e-9:
            break
        index = bisect_right(times, int(round(tick * 1000))) - 1
        if index < 0:
            index = 0
        observations.append(_observe(frames[index][1], round(tick, 6), poses,
                                     ref_cache))
        k += 1
    return observations


def _to_gray(image) -> np.ndarray:
    if isinstance(image, np.ndarray):
        arr = image.astype(np.float64)
        if arr.ndim == 3:
            arr = (0.299 * arr[..., 0] + 0.587 * arr[..., 1]
                   + 0.114 * arr[..., 2])
        if arr.ndim != 2:
            raise ValueError("image array must be 2-D or 3-D")
        return arr
    try:
        if isinstance(image, bytes):
            pil = Image.open(BytesIO(image))
        else:
            pil = Image.open(image)
        return np.asarray(pil.convert("L"), dtype=np.float64)
    except (UnidentifiedImageError, OSError) as exc:
        raise ValueError(f"undecodable image: {exc}")


def blur_score(image) -> float:
    """Sharpness as the variance of a 3x3 Laplacian (4-neighbor kernel,
    reflect padding) over the grayscale image.  Higher is sharper; a constant
    image scores 0."""
    gray = _to_gray(image)
    if gray.size == 0:
        raise ValueError("empty image")
    if min(gray.shape) < 2:
        return 0.0
    padded = np.pad(gray, 1, mode="reflect")
    lap = (padded[:-2, 1:-1] + padded[2:, 1:-1]
           + padded[1:-1, :-2] + padded[1:-1, 2:] - 4.0 * gray)
    return float(lap.var())


def select_egocom_frames(
        scored: Sequence[tuple[Observation, float]],
        min_spacing_s: float = MIN_PAIR_SPACING_S,
) -> tuple[Observation, Observation]:
    """Pick the two frames to keep from a conversation video: among all pairs
    spaced more than ``min_spacing_s`` apart, the pair whose blurrier member
    is sharpest; ties prefer the earlier first frame, then the earlier second."""
    ordered = sorted(scored, key=lambda pair: pair[0].timestamp_s)
    best_key: tuple[float, float, float] | None = None
    best: tuple[Observation, Observation] | None = None
    for i in range(len(ordered)):
        for j in range(i + 1, len(ordered)):
            first, second = ordered[i][0], ordered[j][0]
            if second.timestamp_s - first.timestamp_s <= min_spacing_s:
                continue
            key = (-min(ordered[i][1], ordered[j][1]),
                   first.timestamp_s, second.timestamp_s)
            if best_key is None or key < best_key:
                best_key = key
                best = (first, second)
    if best is None:
        raise ValueError(
            f"no admissible frame pair (need spacing > {min_spacing_s} s)")
    return best


def _expected_for(condition: TestCondition, role: str) -> str:
    if condition.expectation == "open":
        return "open"
    if condition.expectation == "expect_decline":
        return "decline"
    # expect_agree: in a condition that mixes true and false media, the
    # false set is the control and expects a decline (T1, T3); a pure
    # false-set condition keeps the agree expectation (T4's urgent report).
    roles = {r for _, r in condition.selector}
    if role == "false_set" and "true_set" in roles:
        return "decline"
    return "agree"


def episode_id_for(condition_id: str, entry: MediaEntry) -> str:
    parts = [condition_id, entry.dataset, entry.file_id]
    if entry.segment is not None:
        parts.append(entry.segment.label())
    return "/".join(parts) + "#" + _ROLE_SUFFIX[entry.role]


def _placeholder_observation(entry: MediaEntry) -> Observation:
    ref = f"missing:{entry.dataset}/{entry.file_id}"
    if entry.segment is not None:
        ref += f"@{entry.segment.label()}"
    return Observation(frame_ref=ref, timestamp_s=0.0)


def _build_observations(manifest: TestManifest,
                        entry: MediaEntry) -> tuple[list[Observation], list[str]]:
    warnings: list[str] = []
    path = _media_path(manifest.roots, entry)
    if path is None:
        warnings.append(f"media missing: {entry.dataset}/{entry.file_id}")
        return [_placeholder_observation(entry)], warnings

    if entry.kind == "image":
        poses, pose_warnings = _poses_beside(path)
        warnings.extend(pose_warnings)
        obs = _observe(path, 0.0, poses)
        if obs.pose is None and not pose_warnings:
            warnings.append(f"no pose annotation for {path.name}")
        return [obs], warnings

    if entry.kind == "video":
        try:
            observations = extract_frames(path, entry.segment)
        except ValueError as exc:
            warnings.append(str(exc))
            return [_placeholder_observation(entry)], warnings
    else:  # video_pair
        frames = list_frame_files(path)
        poses, pose_warnings = _poses_beside(path)
        warnings.extend(pose_warnings)
        scored = []
        ref_cache: dict[Path, str] = {}
        for t_ms, frame_path in frames:
            obs = _observe(frame_path, t_ms / 1000.0, poses, ref_cache)
            try:
                scored.append((obs, blur_score(frame_path)))
            except ValueError as exc:
                warnings.append(f"{frame_path.name}: {exc}")
        try:
            observations = list(select_egocom_frames(scored))
        except ValueError as exc:
            warnings.append(str(exc))
            return [_placeholder_observation(entry)], warnings

    missing_pose = [Path(o.source_path).name for o in observations
                    if o.pose is None and o.source_path]
    warnings.extend(f"no pose annotation for {name}"
                    for name in dict.fromkeys(missing_pose))
    return observations, warnings


def build_episode(manifest: TestManifest, condition: TestCondition,
                  entry: MediaEntry) -> Episode:
    observations, warnings = _build_observations(manifest, entry)
    available = bool(observations) and all(o.resolvable() for o in observations)
    return Episode(
        episode_id=episode_id_for(condition.id, entry),
        condition_id=condition.id,
        dataset=entry.dataset,
        file_id=entry.file_id,
        role=entry.role,
        robot_situation=condition.robot_situation,
        rubric=condition.rubric,
        expected=_expected_for(condition, entry.role),
        observations=tuple(observations),
        segment=entry.segment.label() if entry.segment else None,
        available=available,
        warnings=tuple(warnings),
    )


def expand(manifest: TestManifest,
           condition_ids: Iterable[str] | None = None) -> list[Episode]:
    """Cross every condition with its selected media, in manifest order.

    Deterministic and order-stable; never raises for missing media (those
    episodes come back unavailable, each carrying its warning).
    """
    wanted = set(condition_ids) if condition_ids is not None else None
    episodes = []
    for condition in manifest.conditions:
        if wanted is not None and condition.id not in wanted:
            continue
        for dataset, role in condition.selector:
            for entry in manifest.media_for(dataset, role):
                episodes.append(build_episode(manifest, condition, entry))
    return episodes


__all__ = [
    "CONDITION_IDS", "DEFAULT_INTERVAL_S", "MIN_PAIR_SPACING_S",
    "POSE_FILE_NAME", "MANIFEST_SCHEMA", "ManifestError", "PoseFileError",
    "Segment", "MediaEntry", "TestCondition", "TestManifest",
    "default_manifest_path", "load_manifest", "load_pose_annotations",
    "list_frame_files", "extract_frames", "blur_score",
    "select_egocom_frames", "expand", "build_episode", "episode_id_for",
]
