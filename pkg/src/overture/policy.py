"""The decision policy: multi-turn conversations that turn situations into
robot actions.

A conversation opens with a fixed preamble (instruction turn plus the
assistant's acknowledgement, loaded verbatim from the prompt fixtures) and
then runs one round per observation.  Every round message restates the robot
situation; rounds after the first also quote the previous action so the model
can track its own behavior.  Text pipelines (A/B/C) send the described human
situation; the raw-image pipeline (D) attaches the camera frame instead, and
only the current round's frame is ever on the wire.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

from .descriptors import DescriptorError, GazeThresholds, run_descriptor
from .domain import (
    ActionDecision,
    Episode,
    HumanSituation,
    RobotSituation,
    RoundRecord,
    Transcript,
    frame_ref_for_bytes,
    strip_trailing_period,
    validate_episode,
)
from .gateway import (
    ChatMessage,
    Gateway,
    GatewayError,
    ImagePart,
    TextPart,
    request_fingerprint,
)
from . import promptlib

REPAIR_INSTRUCTION = ("Your previous reply was not a valid dictionary. "
                      "Reply with only the dictionary.")


class PolicyError(Exception):
    pass


class ParseError(PolicyError):
    def __init__(self, raw: str):
        super().__init__(f"no parsable decision object in reply: {raw[:200]!r}")
        self.raw = raw


class SchemaError(PolicyError):
    def __init__(self, key: str, raw: str = ""):
        super().__init__(f"decision payload missing or invalid key '{key}'")
        self.key = key
        self.raw = raw


@dataclass(frozen=True)
class PipelineConfig:
    """Which pipeline to run and how its model roles are served."""

    pipeline_id: str
    policy_backend: str = "policy"
    descriptor_backend: str = "descriptor"
    thresholds: GazeThresholds = field(default_factory=GazeThresholds)
    temperature: float = 0.0
    max_tokens: int = 1024
    parse_retry_budget: int = 2
    max_rounds: int = 64

    def __post_init__(self) -> None:
        if self.pipeline_id not in ("A", "B", "C", "D"):
            raise ValueError("pipeline_id must be A, B, C or D")

    @property
    def policy_kind(self) -> str:
        return "vlm" if self.pipeline_id == "D" else "llm"

    def snapshot(self, gateway: Gateway | None = None) -> dict:
        """Reproducibility record stored in every transcript."""
        snap = {
            "pipeline_id": self.pipeline_id,
            "policy_kind": self.policy_kind,
            "policy_backend": self.policy_backend,
            "descriptor_backend": (self.descriptor_backend
                                   if self.pipeline_id in ("B", "C") else None),
            "temperature": self.temperature,
            "max_tokens": self.max_tokens,
            "parse_retry_budget": self.parse_retry_budget,
            "max_rounds": self.max_rounds,
            "gaze_thresholds": {"yaw_max_deg": self.thresholds.yaw_max_deg,
                                "pitch_max_deg": self.thresholds.pitch_max_deg},
            "situation_normalization": "strip-trailing-period",
            "prompt_fixtures": {
                "descriptor": promptlib.DESCRIPTOR_PROMPT,
                "policy": (promptlib.VLM_POLICY_PROMPT
                           if self.policy_kind == "vlm"
                           else promptlib.LLM_POLICY_PROMPT),
            },
        }
        if gateway is not None:
            snap["policy_model"] = gateway.config(self.policy_backend).model_name
            if snap["descriptor_backend"]:
                snap["descriptor_model"] = gateway.config(
                    self.descriptor_backend).model_name
        return snap


def build_preamble(policy_kind: str) -> list[ChatMessage]:
    """The fixed instruction turn and acknowledgement turn, verbatim from the
    prompt fixture for this policy kind."""
    if policy_kind not in ("llm", "vlm"):
        raise ValueError("policy_kind must be 'llm' or 'vlm'")
    name = (promptlib.LLM_POLICY_PROMPT if policy_kind == "llm"
            else promptlib.VLM_POLICY_PROMPT)
    return [ChatMessage.text(role, text)
            for role, text in promptlib.fixture_turns(name)]


def build_round_message(policy_kind: str, robot_situation: RobotSituation,
                        round_index: int, human_text: str | None = None,
                        image: ImagePart | None = None,
                        prev_action: str | None = None) -> ChatMessage:
    """Compose one round's user turn.

    Round 0 states the robot situation (plus the described human situation
    for text policies); later rounds additionally quote the previous action.
    Situation and action strings are inserted with their trailing period
    stripped since the templates punctuate.
    """
    if (round_index == 0) != (prev_action is None):
        raise PolicyError("prev_action is required exactly when round_index > 0")
    u = robot_situation.normalized()

    if policy_kind == "llm":
        if not human_text or not human_text.strip():
            raise PolicyError("text policies need a non-empty human situation")
        if round_index == 0:
            text = f"The robot is doing {u}. {human_text}"
        else:
            a = strip_trailing_period(prev_action)
            text = (f"The robot is doing {u}. The robot did action: {a}. "
                    f"After this action: {human_text}")
        return ChatMessage.text("user", text)

    if image is None:
        raise PolicyError("vlm rounds need an image")
    if round_index == 0:
        text = f"The robot is doing {u}."
    else:
        a = strip_trailing_period(prev_action)
        text = (f"The robot is doing {u}. The robot did action: {a}. "
                f"The image was taken after this action.")
    return ChatMessage(role="user", parts=(TextPart(text), image))


def _scan_json_objects(raw: str):
    """Yield every balanced {...} candidate substring, leftmost-first."""
    i = 0
    n = len(raw)
    while i < n:
        if raw[i] != "{":
            i += 1
            continue
        depth = 0
        in_string = False
        escaped = False
        for j in range(i, n):
            c = raw[j]
            if in_string:
                if escaped:
                    escaped = False
                elif c == "\\":
                    escaped = True
                elif c == '"':
                    in_string = False
            elif c == '"':
                in_string = True
            elif c == "{":
                depth += 1
            elif c == "}":
                depth -= 1
                if depth == 0:
                    yield raw[i:j + 1]
                    break
        i += 1


def parse_decision(raw: str, policy_kind: str = "llm") -> ActionDecision:
    """Extract the first well-formed decision object from a model reply.

    Tolerates code fences, surrounding prose and stray text: the reply is
    scanned for the first balanced ``{...}`` that parses as a JSON object.
    ``action`` and ``reason`` must be non-empty strings; VLM replies may add
    ``image_description``.  The verbatim reply is kept in ``raw_response``.
    """
    payload = None
    for candidate in _scan_json_objects(raw):
        try:
            obj = json.loads(candidate)
        except json.JSONDecodeError:
            continue
        if isinstance(obj, dict):
            payload = obj
            break
    if payload is None:
        raise ParseError(raw)

    for key in ("action", "reason"):
        value = payload.get(key)
        if not isinstance(value, str) or not value.strip():
            raise SchemaError(key, raw)

    image_description = None
    if policy_kind == "vlm":
        desc = payload.get("image_description")
        if desc is not None:
            if not isinstance(desc, str):
                raise SchemaError("image_description", raw)
            image_description = desc

    return ActionDecision(action=payload["action"], reason=payload["reason"],
                          image_description=image_description, raw_response=raw)


class ConversationState:
    """Mutable multi-round state for one episode run.

    Confined to a single worker; distinct episodes get distinct states.
    History user turns are replayed text-only so a vision policy's request
    carries exactly the current frame and nothing else.
    """

    def __init__(self, config: PipelineConfig, robot_situation: RobotSituation):
        self.config = config
        self.robot_situation = robot_situation
        self.preamble = build_preamble(config.policy_kind)
        self.history: list[tuple[ChatMessage, ActionDecision]] = []

    @property
    def round_index(self) -> int:
        return len(self.history)

    def prev_action(self) -> str | None:
        return self.history[-1][1].action if self.history else None

    def conversation(self) -> list[ChatMessage]:
        messages = list(self.preamble)
        for round_msg, decision in self.history:
            messages.append(ChatMessage.text("user", round_msg.text_content()))
            messages.append(ChatMessage.text("assistant", decision.raw_response))
        return messages


@dataclass(frozen=True)
class StepResult:
    decision: ActionDecision
    request_fingerprint: str
    latency_ms: int


def step(state: ConversationState, gateway: Gateway,
         human_situation: HumanSituation | None = None,
         image: ImagePart | None = None) -> StepResult:
    """Run one round: append the round message, query the policy backend,
    parse the decision, and commit it to history.

    A reply that fails to parse is retried by appending the unparsable reply
    plus a repair instruction, up to the configured budget; exhaustion fails
    the round and leaves history untouched.
    """
    cfg = state.config
    if state.round_index >= cfg.max_rounds:
        raise PolicyError(f"max rounds exceeded ({cfg.max_rounds})")

    human_text = human_situation.text if human_situation is not None else None
    round_msg = build_round_message(cfg.policy_kind, state.robot_situation,
                                    state.round_index, human_text=human_text,
                                    image=image, prev_action=state.prev_action())
    messages = state.conversation() + [round_msg]

    latency_total = 0
    last_error: PolicyError | None = None
    for _ in range(cfg.parse_retry_budget + 1):
        request = gateway.request(cfg.policy_backend, messages,
                                  temperature=cfg.temperature,
                                  max_tokens=cfg.max_tokens)
        response = gateway.complete(request)
        latency_total += response.latency_ms
        try:
            decision = parse_decision(response.text, cfg.policy_kind)
        except (ParseError, SchemaError) as exc:
            last_error = exc
            messages = messages + [
                ChatMessage.text("assistant", response.text or "(empty reply)"),
                ChatMessage.text("user", REPAIR_INSTRUCTION),
            ]
            continue
        state.history.append((round_msg, decision))
        return StepResult(decision=decision,
                          request_fingerprint=request_fingerprint(request),
                          latency_ms=latency_total)
    assert last_error is not None
    raise last_error


def _read_frame(observation) -> tuple[bytes, str]:
    path = observation.source_path
    if path is None:
        raise PolicyError(f"no frame bytes for {observation.frame_ref}")
    with open(path, "rb") as fh:
        data = fh.read()
    media_type = "image/jpeg" if str(path).lower().endswith((".jpg", ".jpeg")) \
        else "image/png"
    return data, media_type


def run_episode(config: PipelineConfig, episode: Episode,
                gateway: Gateway) -> Transcript:
    """Run every observation of an episode through the configured pipeline,
    one round each, and assemble the transcript.

    Any round failure (descriptor, gateway, or parsing) aborts the episode
    and returns the partial transcript flagged failed.
    """
    violations = validate_episode(episode, config.pipeline_id)
    if violations:
        raise ValueError(f"episode {episode.episode_id} invalid: "
                         + "; ".join(violations))

    snapshot = config.snapshot(gateway)
    state = ConversationState(config, episode.robot_situation)
    rounds: list[RoundRecord] = []

    def failed(index: int, error: Exception) -> Transcript:
        return Transcript(episode_id=episode.episode_id,
                          pipeline_id=config.pipeline_id, rounds=tuple(rounds),
                          config_snapshot=snapshot, status="failed",
                          failed_round=index, error=str(error))

    for i, obs in enumerate(episode.observations):
        descriptor_latency = 0
        flags: tuple[str, ...] = ()
        try:
            if config.pipeline_id == "D":
                data, media_type = _read_frame(obs)
                situation = HumanSituation(text="", source="raw_image")
                result = step(state, gateway,
                              image=ImagePart.from_bytes(data, media_type))
            else:
                desc = run_descriptor(config.pipeline_id, obs, gateway,
                                      config.thresholds,
                                      config.descriptor_backend)
                situation = desc.situation
                descriptor_latency = desc.latency_ms
                flags = desc.flags
                result = step(state, gateway, human_situation=situation)
        except (DescriptorError, GatewayError, PolicyError) as exc:
            return failed(i, exc)

        rounds.append(RoundRecord(
            round_index=i, human_situation=situation,
            request_fingerprint=result.request_fingerprint,
            decision=result.decision, latency_ms=result.latency_ms,
            descriptor_latency_ms=descriptor_latency, flags=flags))

    return Transcript(episode_id=episode.episode_id,
                      pipeline_id=config.pipeline_id, rounds=tuple(rounds),
                      config_snapshot=snapshot)


def decide_once(config: PipelineConfig, gateway: Gateway,
                robot_situation: RobotSituation,
                human_situation: HumanSituation | None = None,
                frame_bytes: bytes | None = None,
                media_type: str = "image/png") -> ActionDecision:
    """Single-round decision outside any episode (the CLI's ``decide``)."""
    state = ConversationState(config, robot_situation)
    if config.pipeline_id == "D":
        if frame_bytes is None:
            raise PolicyError("pipeline D needs an image")
        result = step(state, gateway,
                      image=ImagePart.from_bytes(frame_bytes, media_type))
    else:
        if human_situation is None:
            raise PolicyError("text pipelines need a human situation")
        result = step(state, gateway, human_situation=human_situation)
    return result.decision


__all__ = [
    "PipelineConfig", "ConversationState", "StepResult", "PolicyError",
    "ParseError", "SchemaError", "REPAIR_INSTRUCTION", "build_preamble",
    "build_round_message", "parse_decision", "step", "run_episode",
    "decide_once", "frame_ref_for_bytes",
]
