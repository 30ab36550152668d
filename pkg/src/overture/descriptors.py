"""Turning sensor input into a textual human situation.

Three describers, matching the three text pipelines: a gaze sentence derived
from head pose thresholds, a one-sentence image description from a
vision-capable backend, and their concatenation.  The raw-image pipeline (D)
bypasses this module entirely.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

from .domain import HumanSituation, Observation, PoseAnnotation
from .gateway import ChatMessage, Gateway, ImagePart, TextPart
from .promptlib import descriptor_prompt_text

LOOKING_TOWARD = "The person is looking toward the robot."
LOOKING_AWAY = "The person is looking away from the robot."
NO_PERSON = "No person is clearly visible to the robot."


class DescriptorError(Exception):
    pass


@dataclass(frozen=True)
class GazeThresholds:
    """Half-angles of the symmetric cone that counts as facing the robot.
    Boundary values are inside the cone.  Roll never participates: tilting
    the head does not change facing direction."""

    yaw_max_deg: float = 30.0
    pitch_max_deg: float = 25.0

    def __post_init__(self) -> None:
        for name in ("yaw_max_deg", "pitch_max_deg"):
            v = getattr(self, name)
            if not 0.0 < v <= 90.0:
                raise ValueError(f"{name} must be in (0, 90]")


def gaze_sentence(pose: PoseAnnotation, thresholds: GazeThresholds) -> str:
    """One of three fixed sentences, decided purely by pose and thresholds."""
    if not pose.face_detected:
        return NO_PERSON
    if (abs(pose.yaw_deg) <= thresholds.yaw_max_deg
            and abs(pose.pitch_deg) <= thresholds.pitch_max_deg):
        return LOOKING_TOWARD
    return LOOKING_AWAY


_SENTENCE_BREAK = re.compile(r"[.!?]\s+\S")


def is_multi_sentence(text: str) -> bool:
    return bool(_SENTENCE_BREAK.search(text.strip()))


@dataclass(frozen=True)
class DescriptionResult:
    sentence: str
    latency_ms: int
    multi_sentence: bool


def describe_image(frame_bytes: bytes, gateway: Gateway, backend_id: str,
                   media_type: str = "image/png",
                   max_tokens: int = 256) -> DescriptionResult:
    """Ask the descriptor backend for a one-sentence description of a frame.

    The outbound text part is exactly the descriptor prompt fixture; the
    reply is collapsed to a single line.  A reply with several sentences is
    passed through unmodified but marked so transcripts can flag it.
    """
    message = ChatMessage(role="user", parts=(
        TextPart(descriptor_prompt_text()),
        ImagePart.from_bytes(frame_bytes, media_type),
    ))
    request = gateway.request(backend_id, [message], max_tokens=max_tokens)
    response = gateway.complete(request)
    sentence = " ".join(response.text.split())
    if not sentence:
        raise DescriptorError("empty description")
    return DescriptionResult(sentence=sentence, latency_ms=response.latency_ms,
                             multi_sentence=is_multi_sentence(sentence))


def combine(gaze: str, vlm: str) -> HumanSituation:
    """Concatenate the domain-specific gaze sentence (first) with the general
    description, separated by a single space."""
    if not gaze or not vlm:
        raise DescriptorError("combine requires two non-empty sentences")
    return HumanSituation(text=f"{gaze} {vlm}", source="combined")


@dataclass(frozen=True)
class DescriptorOutput:
    situation: HumanSituation
    latency_ms: int
    flags: tuple[str, ...] = ()


def run_descriptor(pipeline_id: str, observation: Observation, gateway: Gateway,
                   thresholds: GazeThresholds,
                   descriptor_backend: str = "descriptor") -> DescriptorOutput:
    """Dispatch to the describer(s) a pipeline uses.

    A: gaze sentence only.  B: image description only.  C: gaze sentence
    followed by the image description.  D never reaches this module.
    """
    if pipeline_id == "D":
        raise DescriptorError("pattern D takes raw image input; no descriptor runs")
    if pipeline_id not in ("A", "B", "C"):
        raise DescriptorError(f"unknown pipeline '{pipeline_id}'")

    gaze = None
    if pipeline_id in ("A", "C"):
        if observation.pose is None:
            raise DescriptorError("pose annotation required")
        gaze = gaze_sentence(observation.pose, thresholds)

    if pipeline_id == "A":
        return DescriptorOutput(
            situation=HumanSituation(text=gaze, source="gaze_only"), latency_ms=0)

    if not observation.resolvable():
        raise DescriptorError(
            f"frame bytes unavailable for {observation.frame_ref}")
    with open(observation.source_path, "rb") as fh:  # type: ignore[arg-type]
        frame_bytes = fh.read()
    described = describe_image(frame_bytes, gateway, descriptor_backend)
    flags = ("multi-sentence-description",) if described.multi_sentence else ()

    if pipeline_id == "B":
        return DescriptorOutput(
            situation=HumanSituation(text=described.sentence, source="vlm_only"),
            latency_ms=described.latency_ms, flags=flags)
    return DescriptorOutput(situation=combine(gaze, described.sentence),
                            latency_ms=described.latency_ms, flags=flags)
