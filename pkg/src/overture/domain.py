"""Core value types shared by every part of the library.

All types are immutable, validated on construction, and serialize to plain
JSON dicts with stable field names (``to_dict`` / ``from_dict``).  Transcript
streams are written one JSON object per line (JSONL).
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable

PIPELINES = ("A", "B", "C", "D")

# Pipelines that describe the human as text (an LLM policy) vs. the one that
# sends the raw camera frame to a VLM policy.
LLM_PIPELINES = ("A", "B", "C")
VLM_PIPELINE = "D"

URGENCY_HINTS = ("none", "busy", "urgent", "open")
SITUATION_SOURCES = ("gaze_only", "vlm_only", "combined", "raw_image")
MEDIA_ROLES = ("true_set", "false_set", "open_ended")


def _require(cond: bool, msg: str) -> None:
    if not cond:
        raise ValueError(msg)


def strip_trailing_period(text: str) -> str:
    """Normalize a sentence for template insertion: trim whitespace and drop
    at most one trailing period so composed templates never double-punctuate."""
    text = text.strip()
    if text.endswith("."):
        text = text[:-1]
    return text


@dataclass(frozen=True)
class RobotSituation:
    """What the robot is doing / how available it is, as one sentence."""

    text: str
    urgency_hint: str = "none"

    def __post_init__(self) -> None:
        _require(bool(self.text.strip()), "robot situation text must be non-empty")
        _require(self.urgency_hint in URGENCY_HINTS,
                 f"urgency_hint must be one of {URGENCY_HINTS}")

    def normalized(self) -> str:
        """Template form: whitespace-trimmed, no trailing period."""
        return strip_trailing_period(self.text)

    def to_dict(self) -> dict:
        return {"text": self.text, "urgency_hint": self.urgency_hint}

    @classmethod
    def from_dict(cls, d: dict) -> "RobotSituation":
        return cls(text=d["text"], urgency_hint=d.get("urgency_hint", "none"))


@dataclass(frozen=True)
class HumanSituation:
    """Textual description of the human, plus where that text came from.

    ``raw_image`` means no text at all: the observation's frame is handed
    straight to a vision-capable policy.
    """

    text: str
    source: str

    def __post_init__(self) -> None:
        _require(self.source in SITUATION_SOURCES,
                 f"source must be one of {SITUATION_SOURCES}")
        if self.source == "raw_image":
            _require(self.text == "", "raw_image situations carry no text")
        else:
            _require(bool(self.text.strip()), "situation text must be non-empty")

    def to_dict(self) -> dict:
        return {"text": self.text, "source": self.source}

    @classmethod
    def from_dict(cls, d: dict) -> "HumanSituation":
        return cls(text=d["text"], source=d["source"])


@dataclass(frozen=True)
class PoseAnnotation:
    """Per-frame face presence and 6D head-pose angles (degrees).

    When no face is detected the angle fields are absent (``None``) and must
    be ignored.  ``face_area_frac`` is the detected face's bounding-box area
    as a fraction of the frame, used to pick the dominant face when several
    are visible.
    """

    face_detected: bool
    yaw_deg: float | None = None
    pitch_deg: float | None = None
    roll_deg: float | None = None
    face_area_frac: float = 0.0

    def __post_init__(self) -> None:
        for name in ("yaw_deg", "pitch_deg", "roll_deg"):
            v = getattr(self, name)
            if self.face_detected:
                _require(v is not None, f"{name} required when face_detected")
                _require(-180.0 <= float(v) <= 180.0 and v == v,
                         f"{name} must be finite and within [-180, 180]")
            else:
                _require(v is None, f"{name} must be absent without a face")
        _require(0.0 <= self.face_area_frac <= 1.0,
                 "face_area_frac must be within [0, 1]")

    def to_dict(self) -> dict:
        d: dict[str, Any] = {"face_detected": self.face_detected}
        if self.face_detected:
            d.update(yaw_deg=self.yaw_deg, pitch_deg=self.pitch_deg,
                     roll_deg=self.roll_deg)
        d["face_area_frac"] = self.face_area_frac
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PoseAnnotation":
        return cls(
            face_detected=bool(d["face_detected"]),
            yaw_deg=d.get("yaw_deg"),
            pitch_deg=d.get("pitch_deg"),
            roll_deg=d.get("roll_deg"),
            face_area_frac=float(d.get("face_area_frac", 0.0)),
        )


@dataclass(frozen=True)
class Observation:
    """One camera frame available to the robot at ``timestamp_s``.

    ``frame_ref`` is content-addressed (``sha256:<hex>``) once the frame's
    bytes have been seen, so transcripts stay meaningful if files move.
    Frames declared by a manifest but not present on disk keep a
    ``missing:<path>`` placeholder ref.  ``source_path`` is where the bytes
    currently live, when known.
    """

    frame_ref: str
    timestamp_s: float
    pose: PoseAnnotation | None = None
    source_path: str | None = None

    def __post_init__(self) -> None:
        _require(self.timestamp_s >= 0.0, "timestamp_s must be >= 0")
        _require(bool(self.frame_ref), "frame_ref must be non-empty")

    def resolvable(self) -> bool:
        return self.source_path is not None and Path(self.source_path).is_file()

    def to_dict(self) -> dict:
        d: dict[str, Any] = {"frame_ref": self.frame_ref,
                             "timestamp_s": self.timestamp_s}
        if self.pose is not None:
            d["pose"] = self.pose.to_dict()
        if self.source_path is not None:
            d["source_path"] = self.source_path
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Observation":
        pose = d.get("pose")
        return cls(
            frame_ref=d["frame_ref"],
            timestamp_s=float(d["timestamp_s"]),
            pose=PoseAnnotation.from_dict(pose) if pose is not None else None,
            source_path=d.get("source_path"),
        )


def frame_ref_for_bytes(data: bytes) -> str:
    return "sha256:" + hashlib.sha256(data).hexdigest()


@dataclass(frozen=True)
class ActionDecision:
    """A policy's answer for one round: what to do and why.

    ``image_description`` is present only when a VLM policy produced the
    decision.  ``raw_response`` keeps the model output verbatim.
    """

    action: str
    reason: str
    image_description: str | None = None
    raw_response: str = ""

    def __post_init__(self) -> None:
        _require(bool(self.action.strip()), "action must be non-empty")
        _require(bool(self.reason.strip()), "reason must be non-empty")

    def to_dict(self) -> dict:
        d: dict[str, Any] = {"action": self.action, "reason": self.reason}
        if self.image_description is not None:
            d["image_description"] = self.image_description
        d["raw_response"] = self.raw_response
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ActionDecision":
        return cls(
            action=d["action"],
            reason=d["reason"],
            image_description=d.get("image_description"),
            raw_response=d.get("raw_response", ""),
        )


@dataclass(frozen=True)
class Episode:
    """One test situation: a robot situation plus an ordered stream of
    observations drawn from a single media file."""

    episode_id: str
    condition_id: str
    dataset: str
    file_id: str
    role: str
    robot_situation: RobotSituation
    rubric: str
    expected: str  # "agree" | "decline" | "open"
    observations: tuple[Observation, ...]
    segment: str | None = None
    available: bool = True
    warnings: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        _require(self.role in MEDIA_ROLES, f"role must be one of {MEDIA_ROLES}")
        _require(self.expected in ("agree", "decline", "open"),
                 "expected must be agree/decline/open")
        _require(self.rubric in ("assist", "speak"),
                 "rubric must be assist or speak")

    def to_dict(self) -> dict:
        return {
            "episode_id": self.episode_id,
            "condition_id": self.condition_id,
            "dataset": self.dataset,
            "file_id": self.file_id,
            "role": self.role,
            "robot_situation": self.robot_situation.to_dict(),
            "rubric": self.rubric,
            "expected": self.expected,
            "observations": [o.to_dict() for o in self.observations],
            "segment": self.segment,
            "available": self.available,
            "warnings": list(self.warnings),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Episode":
        return cls(
            episode_id=d["episode_id"],
            condition_id=d["condition_id"],
            dataset=d["dataset"],
            file_id=d["file_id"],
            role=d["role"],
            robot_situation=RobotSituation.from_dict(d["robot_situation"]),
            rubric=d["rubric"],
            expected=d["expected"],
            observations=tuple(Observation.from_dict(o)
                               for o in d["observations"]),
            segment=d.get("segment"),
            available=bool(d.get("available", True)),
            warnings=tuple(d.get("warnings", ())),
        )


@dataclass(frozen=True)
class RoundRecord:
    """Bookkeeping for one observation -> message -> decision cycle."""

    round_index: int
    human_situation: HumanSituation
    request_fingerprint: str
    decision: ActionDecision
    latency_ms: int
    descriptor_latency_ms: int = 0
    flags: tuple[str, ...] = ()

    def to_dict(self) -> dict:
        return {
            "round_index": self.round_index,
            "human_situation": self.human_situation.to_dict(),
            "request_fingerprint": self.request_fingerprint,
            "decision": self.decision.to_dict(),
            "latency_ms": self.latency_ms,
            "descriptor_latency_ms": self.descriptor_latency_ms,
            "flags": list(self.flags),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RoundRecord":
        return cls(
            round_index=int(d["round_index"]),
            human_situation=HumanSituation.from_dict(d["human_situation"]),
            request_fingerprint=d["request_fingerprint"],
            decision=ActionDecision.from_dict(d["decision"]),
            latency_ms=int(d["latency_ms"]),
            descriptor_latency_ms=int(d.get("descriptor_latency_ms", 0)),
            flags=tuple(d.get("flags", ())),
        )


@dataclass(frozen=True)
class Transcript:
    """Full record of one episode run under one pipeline."""

    episode_id: str
    pipeline_id: str
    rounds: tuple[RoundRecord, ...]
    config_snapshot: dict = field(default_factory=dict)
    status: str = "complete"  # "complete" | "failed"
    failed_round: int | None = None
    error: str | None = None

    def __post_init__(self) -> None:
        _require(self.pipeline_id in PIPELINES,
                 f"pipeline_id must be one of {PIPELINES}")
        _require(self.status in ("complete", "failed"),
                 "status must be complete or failed")
        for i, r in enumerate(self.rounds):
            _require(r.round_index == i, "round_index must be contiguous from 0")

    def to_dict(self) -> dict:
        return {
            "episode_id": self.episode_id,
            "pipeline_id": self.pipeline_id,
            "rounds": [r.to_dict() for r in self.rounds],
            "config_snapshot": self.config_snapshot,
            "status": self.status,
            "failed_round": self.failed_round,
            "error": self.error,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Transcript":
        return cls(
            episode_id=d["episode_id"],
            pipeline_id=d["pipeline_id"],
            rounds=tuple(RoundRecord.from_dict(r) for r in d["rounds"]),
            config_snapshot=d.get("config_snapshot", {}),
            status=d.get("status", "complete"),
            failed_round=d.get("failed_round"),
            error=d.get("error"),
        )

    def canonical_dict(self) -> dict:
        """Latency-free form used for determinism comparisons: identical
        inputs must yield identical canonical dicts, while wall-clock latency
        is free to vary run to run."""
        d = self.to_dict()
        for r in d["rounds"]:
            r["latency_ms"] = 0
            r["descriptor_latency_ms"] = 0
        return d


def dump_transcripts_jsonl(transcripts: Iterable[Transcript], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for t in transcripts:
            fh.write(json.dumps(t.to_dict(), ensure_ascii=False) + "\n")


def load_transcripts_jsonl(path: str | Path) -> list[Transcript]:
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                out.append(Transcript.from_dict(json.loads(line)))
    return out


def validate_episode(episode: Episode, pipeline_id: str | None = None) -> list[str]:
    """Check an episode before running it.  Returns a list of violation
    strings (empty means valid); never raises.

    Pipelines A and C need a pose annotation on every frame; frame refs must
    resolve to actual bytes whose hash matches the ref.
    """
    violations: list[str] = []
    if not episode.observations:
        violations.append("episode has no observations")
        return violations

    prev = None
    for i, obs in enumerate(episode.observations):
        if prev is not None and obs.timestamp_s <= prev:
            violations.append(
                f"non-increasing timestamps at observation {i} "
                f"({obs.timestamp_s} after {prev})")
        prev = obs.timestamp_s

        if pipeline_id in ("A", "C") and obs.pose is None:
            violations.append(f"missing pose annotation at observation {i}")

        if not obs.resolvable():
            violations.append(f"unresolvable frame reference at observation {i}: "
                              f"{obs.frame_ref}")
        elif obs.frame_ref.startswith("sha256:"):
            data = Path(obs.source_path).read_bytes()  # type: ignore[arg-type]
            if frame_ref_for_bytes(data) != obs.frame_ref:
                violations.append(
                    f"frame bytes do not match content hash at observation {i}")
    return violations
