"""Deciding how a robot should act at the beginning of a human-robot
interaction, by orchestrating language- and vision-model calls in four
pipeline patterns, plus the evaluation harness for comparing them."""

from .domain import (
    ActionDecision,
    Episode,
    HumanSituation,
    Observation,
    PoseAnnotation,
    RobotSituation,
    RoundRecord,
    Transcript,
    strip_trailing_period,
    validate_episode,
)
from .descriptors import GazeThresholds, gaze_sentence, run_descriptor
from .gateway import (
    BackendConfig,
    ChatMessage,
    ChatRequest,
    ChatResponse,
    Gateway,
    ResponseCache,
    request_fingerprint,
)
from .policy import (
    ParseError,
    PipelineConfig,
    SchemaError,
    build_round_message,
    decide_once,
    parse_decision,
    run_episode,
)
from .testset import (
    TestCondition,
    TestManifest,
    blur_score,
    default_manifest_path,
    expand,
    extract_frames,
    load_manifest,
    select_egocom_frames,
)
from .evaluation import (
    ClassifierConfig,
    ConditionResult,
    aggregate,
    classify_action,
    render_report,
)
from .miniset import generate_mini_dataset

__version__ = "0.1.0"

__all__ = [
    "ActionDecision", "BackendConfig", "ChatMessage", "ChatRequest",
    "ChatResponse", "ClassifierConfig", "ConditionResult", "Episode",
    "Gateway", "GazeThresholds", "HumanSituation", "Observation",
    "ParseError", "PipelineConfig", "PoseAnnotation", "ResponseCache",
    "RobotSituation", "RoundRecord", "SchemaError", "TestCondition",
    "TestManifest", "Transcript", "aggregate", "blur_score",
    "build_round_message", "classify_action", "decide_once",
    "default_manifest_path", "expand", "extract_frames",
    "gaze_sentence", "generate_mini_dataset", "load_manifest",
    "parse_decision", "render_report", "request_fingerprint",
    "run_descriptor", "run_episode", "select_egocom_frames",
    "strip_trailing_period", "validate_episode",
]
