"""Turning transcripts into result tables.

An action string is classified as agreeing (the robot moves to assist or to
speak) or non-agreeing (it waits, declines, or carries on) under the
condition's rubric.  The default is a fixed-lexicon rules classifier; the
published counts this harness compares against were hand-labeled, so the
mapping from generated text to a count is an approximation and every report
says so.  Per-episode agreement is the OR over rounds; results render as
three tables mirroring the published layout, with the published numbers
alongside for comparison.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from statistics import fmean

from .domain import ActionDecision, Transcript
from .gateway import ChatMessage, Gateway
from .testset import TestCondition
from . import promptlib

JUDGE_PROMPT = "judge_v1"

DEFAULT_ASSIST_AGREE = ("assist", "offer", "ask if", "how can i", "help you")
DEFAULT_SPEAK_AGREE = ("say '", "speak", "excuse me", "ask",
                       "approach the person and")
# Wait/decline constructions override an agree match in the same action.
DEFAULT_OVERRIDES = ("wait", "not speak", "observe", "continue with its task",
                     "remain stationary", "postpone", "refrain")

_JUDGE_QUESTIONS = {
    "assist": ("Does the action offer or begin assistance to the person, "
               "rather than waiting or declining?"),
    "speak": ("Does the action speak to the person to get their attention, "
              "rather than waiting or staying silent?"),
}


class ClassificationError(Exception):
    pass


@dataclass(frozen=True)
class ClassifierConfig:
    mode: str = "rules"
    assist_agree_terms: tuple[str, ...] = DEFAULT_ASSIST_AGREE
    assist_decline_terms: tuple[str, ...] = DEFAULT_OVERRIDES
    speak_agree_terms: tuple[str, ...] = DEFAULT_SPEAK_AGREE
    speak_wait_terms: tuple[str, ...] = DEFAULT_OVERRIDES
    judge_backend: str | None = None

    def __post_init__(self) -> None:
        if self.mode not in ("rules", "judge"):
            raise ValueError("mode must be 'rules' or 'judge'")
        if self.mode == "rules":
            for name in ("assist_agree_terms", "assist_decline_terms",
                         "speak_agree_terms", "speak_wait_terms"):
                if not getattr(self, name):
                    raise ValueError(f"rules mode requires non-empty {name}")
        if self.mode == "judge" and not self.judge_backend:
            raise ValueError("judge mode requires a judge_backend")

    def lexicons_for(self, rubric: str) -> tuple[tuple[str, ...], tuple[str, ...]]:
        if rubric == "assist":
            return self.assist_agree_terms, self.assist_decline_terms
        if rubric == "speak":
            return self.speak_agree_terms, self.speak_wait_terms
        raise ValueError(f"unknown rubric {rubric!r}")


@dataclass(frozen=True)
class Classification:
    agreeing: bool
    evidence: str
    matched_agree: tuple[str, ...] = ()
    matched_override: tuple[str, ...] = ()


def _judge_query(action: str, rubric: str, config: ClassifierConfig,
                 gateway: Gateway) -> Classification:
    turns = promptlib.fixture_turns(JUDGE_PROMPT)
    template = turns[0][1]
    prompt = (template.replace("{action}", action)
              .replace("{question}", _JUDGE_QUESTIONS[rubric]))
    for strict in (False, True):
        text = prompt if not strict else \
            prompt + "\n\nAnswer with exactly one word: yes or no."
        request = gateway.request(config.judge_backend,
                                  [ChatMessage.text("user", text)],
                                  temperature=0.0, max_tokens=8)
        reply = gateway.complete(request).text.strip().lower().rstrip(".!")
        if reply in ("yes", "no"):
            return Classification(agreeing=(reply == "yes"),
                                  evidence=f"judge: {reply}")
    raise ClassificationError(
        f"judge backend gave no yes/no answer for action {action!r}")


def classify_action(decision: ActionDecision, rubric: str,
                    config: ClassifierConfig,
                    gateway: Gateway | None = None) -> Classification:
    """Is this action agreeing under the rubric?

    Rules mode is pure and deterministic: case-insensitive substring match
    against the agree lexicon, with any wait/decline match overriding.  An
    empty action asserts nothing and never agrees.
    """
    text = decision.action.strip().lower()
    if not text:
        return Classification(agreeing=False, evidence="empty")

    if config.mode == "judge":
        if gateway is None:
            raise ClassificationError("judge mode needs a gateway")
        return _judge_query(decision.action, rubric, config, gateway)

    agree_terms, override_terms = config.lexicons_for(rubric)
    matched_agree = tuple(t for t in agree_terms if t.lower() in text)
    matched_override = tuple(t for t in override_terms if t.lower() in text)
    agreeing = bool(matched_agree) and not matched_override
    evidence = (f"agree={list(matched_agree)} "
                f"override={list(matched_override)}")
    return Classification(agreeing=agreeing, evidence=evidence,
                          matched_agree=matched_agree,
                          matched_override=matched_override)


@dataclass(frozen=True)
class RoundClassification:
    round_index: int
    action: str
    agreeing: bool
    evidence: str


@dataclass(frozen=True)
class EpisodeClassification:
    episode_id: str
    agreed: bool
    deciding_round: int | None
    incomplete: bool
    rounds: tuple[RoundClassification, ...]

    def to_dict(self) -> dict:
        return {
            "episode_id": self.episode_id,
            "agreed": self.agreed,
            "deciding_round": self.deciding_round,
            "incomplete": self.incomplete,
            "rounds": [vars(r) for r in self.rounds],
        }


def classify_transcript(transcript: Transcript, rubric: str,
                        config: ClassifierConfig,
                        gateway: Gateway | None = None) -> EpisodeClassification:
    """Per-episode agreement is the OR over that episode's rounds; the
    deciding round is the first agreeing one.  A failed episode is judged on
    its completed rounds and flagged incomplete."""
    rounds = []
    deciding = None
    for record in transcript.rounds:
        c = classify_action(record.decision, rubric, config, gateway)
        rounds.append(RoundClassification(
            round_index=record.round_index, action=record.decision.action,
            agreeing=c.agreeing, evidence=c.evidence))
        if c.agreeing and deciding is None:
            deciding = record.round_index
    return EpisodeClassification(
        episode_id=transcript.episode_id, agreed=deciding is not None,
        deciding_round=deciding, incomplete=(transcript.status == "failed"),
        rounds=tuple(rounds))


@dataclass(frozen=True)
class ConditionResult:
    condition_id: str
    pipeline_id: str
    agree_count: int
    total: int
    per_episode: tuple[EpisodeClassification, ...]

    def __post_init__(self) -> None:
        if not (0 <= self.agree_count <= self.total):
            raise ValueError("agree_count must lie in [0, total]")
        if self.agree_count != sum(1 for e in self.per_episode if e.agreed):
            raise ValueError("agree_count disagrees with per-episode flags")
        for e in self.per_episode:
            if e.agreed != (e.deciding_round is not None):
                raise ValueError("agreed flag must mirror deciding_round")

    def subset(self, role_suffix: str | None) -> tuple[int, int]:
        """(agree, total) over episodes with the given role suffix
        (``true``/``false``/``open``), or the whole condition for None."""
        if role_suffix is None:
            episodes = self.per_episode
        else:
            episodes = tuple(e for e in self.per_episode
                             if e.episode_id.endswith("#" + role_suffix))
        return sum(1 for e in episodes if e.agreed), len(episodes)


def aggregate(transcripts: list[Transcript], condition: TestCondition,
              config: ClassifierConfig, pipeline_id: str | None = None,
              gateway: Gateway | None = None) -> ConditionResult:
    """Fold one pipeline's transcripts for one condition into counts."""
    for t in transcripts:
        if not t.episode_id.startswith(condition.id + "/"):
            raise ValueError(
                f"transcript {t.episode_id} does not belong to {condition.id}")
        if pipeline_id is None:
            pipeline_id = t.pipeline_id
        elif t.pipeline_id != pipeline_id:
            raise ValueError("transcripts span multiple pipelines")
    if pipeline_id is None:
        raise ValueError("empty transcript list needs an explicit pipeline_id")

    per_episode = tuple(sorted(
        (classify_transcript(t, condition.rubric, config, gateway)
         for t in transcripts),
        key=lambda e: e.episode_id))
    return ConditionResult(
        condition_id=condition.id, pipeline_id=pipeline_id,
        agree_count=sum(1 for e in per_episode if e.agreed),
        total=len(per_episode), per_episode=per_episode)


# Report layout: (table key, row label, condition id, role suffix or None).
REPORT_ROWS = (
    ("assist", "T1 true set", "T1", "true"),
    ("assist", "T1 false set", "T1", "false"),
    ("assist", "T2", "T2", None),
    ("assist", "T2'", "T2'", None),
    ("speak", "T3 true set", "T3", "true"),
    ("speak", "T3 false set", "T3", "false"),
    ("speak", "T4", "T4", None),
    ("open", "T3'", "T3'", None),
    ("open", "T3''", "T3''", None),
)

REPORT_TABLES = (
    ("assist", "Assisting a person (T1, T2, T2')",
     "Episodes where the pipeline returned an agreeing action (assisting "
     "the human). Higher is better for the true set; lower is better for "
     "the false set and T2."),
    ("speak", "Speaking to a person (T3, T4)",
     "Episodes where the pipeline returned an agreeing action (speak) "
     "instead of waiting. Higher is better for the true set and T4; lower "
     "is better for the false set."),
    ("open", "Open-ended situations (T3', T3'')",
     "Episodes where the pipeline returned an agreeing action (speak)."),
)

# Published counts for the side-by-side comparison column.
PAPER_REFERENCE = {
    ("T1 true set", "A"): (7, 7), ("T1 true set", "B"): (4, 7),
    ("T1 true set", "C"): (7, 7), ("T1 true set", "D"): (7, 7),
    ("T1 false set", "A"): (2, 3), ("T1 false set", "B"): (2, 3),
    ("T1 false set", "C"): (0, 3), ("T1 false set", "D"): (2, 3),
    ("T2", "A"): (1, 7), ("T2", "B"): (1, 7),
    ("T2", "C"): (4, 7), ("T2", "D"): (0, 7),
    ("T2'", "A"): (7, 7), ("T2'", "B"): (2, 7),
    ("T2'", "C"): (7, 7), ("T2'", "D"): (2, 7),
    ("T3 true set", "A"): (4, 4), ("T3 true set", "B"): (4, 4),
    ("T3 true set", "C"): (4, 4), ("T3 true set", "D"): (4, 4),
    ("T3 false set", "A"): (3, 3), ("T3 false set", "B"): (0, 3),
    ("T3 false set", "C"): (0, 3), ("T3 false set", "D"): (0, 3),
    ("T4", "A"): (3, 3), ("T4", "B"): (2, 3),
    ("T4", "C"): (3, 3), ("T4", "D"): (3, 3),
    ("T3'", "A"): (25, 25), ("T3'", "B"): (5, 25),
    ("T3'", "C"): (10, 25), ("T3'", "D"): (12, 25),
    ("T3''", "A"): (15, 25), ("T3''", "B"): (10, 25),
    ("T3''", "C"): (7, 25), ("T3''", "D"): (18, 25),
}

PIPELINE_ORDER = ("A", "B", "C", "D")


def _row_cells(results_by: dict[tuple[str, str], ConditionResult],
               condition_id: str, role_suffix: str | None, label: str,
               include_reference: bool) -> list[tuple[str, str]]:
    """Per pipeline: (our cell with annotation, reference cell)."""
    cells = []
    for pipeline in PIPELINE_ORDER:
        ref = PAPER_REFERENCE.get((label, pipeline))
        ref_cell = f"{ref[0]}/{ref[1]}" if ref else "—"
        result = results_by.get((condition_id, pipeline))
        if result is None:
            cells.append(("—", ref_cell))
            continue
        agree, total = result.subset(role_suffix)
        if total == 0:
            cells.append(("—", ref_cell))
            continue
        cell = f"{agree}/{total}"
        if include_reference and ref is not None:
            if total != ref[1]:
                cell += " ~"
            elif agree == ref[0]:
                cell += " ="
            else:
                cell += " ≠"
        cells.append((cell, ref_cell))
    return cells


def latency_summary(transcripts: list[Transcript]) -> dict[str, dict]:
    """Per pipeline: round count, mean and p95 of per-round latency
    (descriptor plus policy), in milliseconds."""
    by_pipeline: dict[str, list[int]] = {}
    for t in transcripts:
        values = by_pipeline.setdefault(t.pipeline_id, [])
        for r in t.rounds:
            values.append(r.latency_ms + r.descriptor_latency_ms)
    summary = {}
    for pipeline, values in sorted(by_pipeline.items()):
        if not values:
            continue
        ordered = sorted(values)
        # Linear-interpolated 95th percentile.
        rank = 0.95 * (len(ordered) - 1)
        low = int(rank)
        frac = rank - low
        p95 = ordered[low] if low + 1 >= len(ordered) else \
            ordered[low] * (1 - frac) + ordered[low + 1] * frac
        summary[pipeline] = {"rounds": len(ordered),
                             "mean_ms": fmean(ordered), "p95_ms": float(p95)}
    return summary


def render_report(results: list[ConditionResult],
                  transcripts: list[Transcript] | None = None,
                  generated_at: str | None = None,
                  run_info: dict | None = None,
                  include_reference: bool = True) -> str:
    """The Markdown report: three result tables in the published layout with
    the published numbers alongside, then latency and failure summaries.

    Cell annotations: ``=`` matches the published count, ``≠`` diverges,
    ``~`` is not comparable (different episode total).  The ``Generated:``
    line is the only content that varies between identical runs.  With no
    results at all (nothing ran) the tables render with every cell dashed.
    """
    results_by = {(r.condition_id, r.pipeline_id): r for r in results}

    lines = ["# Engagement evaluation report", ""]
    if generated_at:
        lines += [f"Generated: {generated_at}", ""]
    lines += [
        "Classifier: fixed-lexicon rules. The published study hand-labeled "
        "what counts as an agreeing action; no formal criterion exists, so "
        "these automated counts approximate that judgment and the reference "
        "column is for orientation, not a tolerance.",
        "",
    ]
    if run_info:
        for key in sorted(run_info):
            value = run_info[key]
            if isinstance(value, (list, tuple)):
                value = ", ".join(str(v) for v in value) or "none"
            lines.append(f"- {key}: {value}")
        lines.append("")

    for table_key, title, caption in REPORT_TABLES:
        rows = [r for r in REPORT_ROWS if r[0] == table_key]
        lines += [f"## {title}", "", caption, ""]
        header = "| Situation |"
        divider = "|---|"
        for pipeline in PIPELINE_ORDER:
            header += f" {pipeline} | {pipeline} (paper) |"
            divider += "---|---|"
        lines += [header, divider]
        for _, label, condition_id, role_suffix in rows:
            cells = _row_cells(results_by, condition_id, role_suffix, label,
                               include_reference)
            row = f"| {label} |"
            for ours, ref in cells:
                row += f" {ours} | {ref} |"
            lines.append(row)
        lines.append("")

    if transcripts:
        summary = latency_summary(transcripts)
        if summary:
            lines += ["## Per-round latency", "",
                      "| Pipeline | Rounds | Mean (ms) | p95 (ms) |",
                      "|---|---|---|---|"]
            for pipeline, stats in summary.items():
                lines.append(
                    f"| {pipeline} | {stats['rounds']} "
                    f"| {stats['mean_ms']:.1f} | {stats['p95_ms']:.1f} |")
            lines.append("")

    incomplete = sorted({e.episode_id for r in results
                         for e in r.per_episode if e.incomplete})
    failed = sorted({t.episode_id for t in (transcripts or [])
                     if t.status == "failed"})
    problems = sorted(set(incomplete) | set(failed))
    if problems:
        lines += ["## Incomplete episodes", ""]
        lines += [f"- {episode_id}" for episode_id in problems]
        lines.append("")
    if run_info and run_info.get("unavailable_episodes"):
        lines += ["## Unavailable episodes (media not on disk)", ""]
        lines += [f"- {episode_id}"
                  for episode_id in run_info["unavailable_episodes"]]
        lines.append("")
    return "\n".join(lines)


def render_csv(results: list[ConditionResult],
               include_reference: bool = True) -> str:
    """Flat CSV mirror of the report tables."""
    results_by = {(r.condition_id, r.pipeline_id): r for r in results}
    lines = ["table,situation,pipeline,agree,total,paper_agree,paper_total,"
             "comparison"]
    for table_key, label, condition_id, role_suffix in REPORT_ROWS:
        for pipeline in PIPELINE_ORDER:
            result = results_by.get((condition_id, pipeline))
            ref = PAPER_REFERENCE.get((label, pipeline))
            if result is None:
                continue
            agree, total = result.subset(role_suffix)
            if total == 0:
                continue
            if not include_reference or ref is None:
                comparison = ""
            elif total != ref[1]:
                comparison = "incomparable"
            elif agree == ref[0]:
                comparison = "match"
            else:
                comparison = "differ"
            ref_agree = ref[0] if ref else ""
            ref_total = ref[1] if ref else ""
            lines.append(f"{table_key},{label},{pipeline},{agree},{total},"
                         f"{ref_agree},{ref_total},{comparison}")
    return "\n".join(lines) + "\n"


def evidence_jsonl(results: list[ConditionResult]) -> str:
    """One JSON line per (episode, pipeline) with per-round evidence."""
    lines = []
    for result in sorted(results,
                         key=lambda r: (r.condition_id, r.pipeline_id)):
        for episode in result.per_episode:
            doc = {"condition_id": result.condition_id,
                   "pipeline_id": result.pipeline_id}
            doc.update(episode.to_dict())
            lines.append(json.dumps(doc, sort_keys=True))
    return "\n".join(lines) + "\n" if lines else ""


__all__ = [
    "ClassifierConfig", "Classification", "ClassificationError",
    "RoundClassification", "EpisodeClassification", "ConditionResult",
    "classify_action", "classify_transcript", "aggregate",
    "latency_summary", "render_report", "render_csv", "evidence_jsonl",
    "REPORT_ROWS", "REPORT_TABLES", "PAPER_REFERENCE", "PIPELINE_ORDER",
    "DEFAULT_ASSIST_AGREE", "DEFAULT_SPEAK_AGREE", "DEFAULT_OVERRIDES",
]
