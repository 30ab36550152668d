"""Operator entry point: single decisions, full evaluation runs, frame
ingestion, cache management, and report re-rendering.

Evaluation parallelizes at the episode level; per-backend rate limits are
enforced globally because every worker shares one gateway.  Stdout stays
machine-friendly (one JSON document with ``--json``, short status lines
otherwise); tables and transcripts go to files under ``--out``.
"""

from __future__ import annotations

import argparse
import json
import shutil
import subprocess
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path

from .descriptors import DescriptorError, run_descriptor
from .domain import (
    Episode,
    Observation,
    PoseAnnotation,
    RobotSituation,
    Transcript,
    dump_transcripts_jsonl,
    frame_ref_for_bytes,
    load_transcripts_jsonl,
    validate_episode,
)
from .evaluation import (
    ClassifierConfig,
    aggregate,
    evidence_jsonl,
    render_csv,
    render_report,
)
from .gateway import BackendConfig, Gateway, GatewayError, ResponseCache
from .policy import PipelineConfig, PolicyError, decide_once, run_episode
from .testset import ManifestError, TestManifest, default_manifest_path, expand, load_manifest

_CACHE_MODE_CHOICES = ("record", "replay", "strict-replay", "passthrough")

INGEST_COMMAND = ('ffmpeg -i "{video}" -vf "fps={fps}" -start_number 0 '
                  '"{out_dir}/raw_%06d.png"')


@dataclass(frozen=True)
class RunSpec:
    pipelines: tuple[str, ...]
    conditions: tuple[str, ...] | None
    manifest_path: Path
    cache_mode: str
    out_dir: Path
    backends_path: Path | None = None
    jobs: int = 4

    def __post_init__(self) -> None:
        if not self.pipelines:
            raise ValueError("at least one pipeline is required")
        if self.conditions is not None and not self.conditions:
            raise ValueError("at least one condition is required")


def _utc_now() -> str:
    return datetime.now(timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


def _load_backends(path: Path | None) -> dict[str, BackendConfig]:
    """Backend config file ({"backends": {id: {...}}}); scripted descriptor
    and policy backends when no file is given."""
    if path is None:
        return {bid: BackendConfig(backend_id=bid, kind="scripted")
                for bid in ("descriptor", "policy")}
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise GatewayError(f"cannot read backends config {path}: {exc}")
    entries = doc.get("backends")
    if not isinstance(entries, dict) or not entries:
        raise GatewayError(
            f"backends config {path} must have a non-empty 'backends' map")
    return {bid: BackendConfig.from_dict(bid, cfg)
            for bid, cfg in entries.items()}


def _make_gateway(backends_path: Path | None, cache_dir: Path | None,
                  cache_mode: str) -> Gateway:
    mode = cache_mode.replace("-", "_")
    cache = None
    if mode != "passthrough":
        if cache_dir is None:
            raise GatewayError(f"--cache is required for {cache_mode} mode")
        cache = ResponseCache(cache_dir)
    return Gateway(_load_backends(backends_path), cache=cache, mode=mode)


def _parse_pose(pairs: list[str]) -> PoseAnnotation:
    values: dict[str, float] = {}
    for pair in pairs:
        key, _, raw = pair.partition("=")
        if key not in ("yaw", "pitch", "roll", "area") or not raw:
            raise ValueError(f"pose values look like yaw=0 pitch=0, got {pair!r}")
        values[key] = float(raw)
    return PoseAnnotation(
        face_detected=True,
        yaw_deg=values.get("yaw", 0.0),
        pitch_deg=values.get("pitch", 0.0),
        roll_deg=values.get("roll", 0.0),
        face_area_frac=values.get("area", 0.05),
    )


def _emit(doc: dict, as_json: bool) -> None:
    if as_json:
        print(json.dumps(doc, indent=2, sort_keys=True, ensure_ascii=False))
    else:
        for key, value in doc.items():
            if isinstance(value, (list, tuple)):
                value = ", ".join(str(v) for v in value)
            print(f"{key}: {value}")


def cmd_decide(args: argparse.Namespace, parser: argparse.ArgumentParser) -> int:
    pipeline = args.pipeline
    needs_pose = pipeline in ("A", "C")
    needs_image = pipeline in ("B", "C", "D")
    if needs_pose and not args.pose:
        parser.error(f"pipeline {pipeline} requires --pose")
    if needs_image and not args.image:
        parser.error(f"pipeline {pipeline} requires --image")

    try:
        pose = _parse_pose(args.pose) if args.pose else None
    except ValueError as exc:
        parser.error(str(exc))

    frame_bytes = None
    source_path = None
    frame_ref = "cli:input"
    if args.image:
        try:
            frame_bytes = Path(args.image).read_bytes()
        except OSError as exc:
            print(f"error: cannot read image: {exc}", file=sys.stderr)
            return 1
        source_path = str(args.image)
        frame_ref = frame_ref_for_bytes(frame_bytes)

    gateway = _make_gateway(args.backends, args.cache, args.cache_mode)
    config = PipelineConfig(pipeline_id=pipeline)
    robot_situation = RobotSituation(text=args.robot_situation)

    try:
        human_text = None
        if pipeline == "D":
            decision = decide_once(config, gateway, robot_situation,
                                   frame_bytes=frame_bytes)
        else:
            observation = Observation(frame_ref=frame_ref, timestamp_s=0.0,
                                      pose=pose, source_path=source_path)
            described = run_descriptor(pipeline, observation, gateway,
                                       config.thresholds)
            human_text = described.situation.text
            decision = decide_once(config, gateway, robot_situation,
                                   human_situation=described.situation)
    except (DescriptorError, GatewayError, PolicyError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1

    doc = {"pipeline": pipeline, "action": decision.action,
           "reason": decision.reason}
    if decision.image_description is not None:
        doc["image_description"] = decision.image_description
    if human_text is not None:
        doc["human_situation"] = human_text
    _emit(doc, args.json)
    return 0


def _run_one(config: PipelineConfig, episode: Episode,
             gateway: Gateway) -> Transcript:
    violations = validate_episode(episode, config.pipeline_id)
    if violations:
        return Transcript(episode_id=episode.episode_id,
                          pipeline_id=config.pipeline_id, rounds=(),
                          config_snapshot=config.snapshot(gateway),
                          status="failed", error="; ".join(violations))
    try:
        return run_episode(config, episode, gateway)
    except Exception as exc:  # single episode never sinks the whole run
        return Transcript(episode_id=episode.episode_id,
                          pipeline_id=config.pipeline_id, rounds=(),
                          config_snapshot=config.snapshot(gateway),
                          status="failed", error=str(exc))


def _aggregate_all(manifest: TestManifest, transcripts: list[Transcript],
                   classifier: ClassifierConfig,
                   gateway: Gateway | None = None) -> list:
    by_key: dict[tuple[str, str], list[Transcript]] = {}
    for t in transcripts:
        condition_id = t.episode_id.split("/", 1)[0]
        by_key.setdefault((condition_id, t.pipeline_id), []).append(t)
    results = []
    for condition in manifest.conditions:
        for pipeline in ("A", "B", "C", "D"):
            group = by_key.get((condition.id, pipeline))
            if group:
                results.append(aggregate(group, condition, classifier,
                                         pipeline_id=pipeline,
                                         gateway=gateway))
    return results


def _write_outputs(out_dir: Path, manifest: TestManifest,
                   transcripts: list[Transcript],
                   classifier: ClassifierConfig, run_info: dict,
                   gateway: Gateway | None = None) -> dict:
    out_dir.mkdir(parents=True, exist_ok=True)
    by_pipeline: dict[str, list[Transcript]] = {}
    for t in transcripts:
        by_pipeline.setdefault(t.pipeline_id, []).append(t)
    for pipeline, group in sorted(by_pipeline.items()):
        group.sort(key=lambda t: t.episode_id)
        dump_transcripts_jsonl(group, out_dir / f"transcripts_{pipeline}.jsonl")

    results = _aggregate_all(manifest, transcripts, classifier, gateway)
    report = render_report(results, transcripts=transcripts,
                           generated_at=_utc_now(), run_info=run_info)
    (out_dir / "report.md").write_text(report, encoding="utf-8")
    (out_dir / "report.csv").write_text(render_csv(results), encoding="utf-8")
    (out_dir / "evidence.jsonl").write_text(evidence_jsonl(results),
                                            encoding="utf-8")

    failed = sorted(t.episode_id for t in transcripts if t.status == "failed")
    return {
        "report": str(out_dir / "report.md"),
        "csv": str(out_dir / "report.csv"),
        "evidence": str(out_dir / "evidence.jsonl"),
        "episodes_run": len(transcripts),
        "failed_episodes": failed,
    }


def cmd_eval(args: argparse.Namespace, parser: argparse.ArgumentParser) -> int:
    manifest_path = Path(args.manifest) if args.manifest \
        else default_manifest_path()
    pipelines = tuple(args.pipelines.replace(",", "").upper()) \
        if args.pipelines else ("A", "B", "C", "D")
    for p in pipelines:
        if p not in ("A", "B", "C", "D"):
            parser.error(f"unknown pipeline {p!r}")
    conditions = tuple(c.strip() for c in args.conditions.split(",")) \
        if args.conditions else None

    try:
        spec = RunSpec(pipelines=pipelines, conditions=conditions,
                       manifest_path=manifest_path,
                       cache_mode=args.cache_mode, out_dir=Path(args.out),
                       backends_path=args.backends, jobs=args.jobs)
    except ValueError as exc:
        parser.error(str(exc))

    try:
        manifest = load_manifest(spec.manifest_path)
    except ManifestError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    if conditions:
        known = {c.id for c in manifest.conditions}
        unknown = [c for c in conditions if c not in known]
        if unknown:
            parser.error(f"conditions not in manifest: {', '.join(unknown)}")

    cache_dir = Path(args.cache) if args.cache else spec.out_dir / "cache"
    try:
        gateway = _make_gateway(spec.backends_path, cache_dir, spec.cache_mode)
    except GatewayError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1

    episodes = expand(manifest, conditions)
    runnable = [e for e in episodes if e.available]
    unavailable = sorted(e.episode_id for e in episodes if not e.available)

    configs = {p: PipelineConfig(pipeline_id=p) for p in spec.pipelines}
    tasks = [(p, e) for p in spec.pipelines for e in runnable]
    transcripts_by: dict[tuple[str, str], Transcript] = {}
    with ThreadPoolExecutor(max_workers=max(1, spec.jobs)) as pool:
        futures = {pool.submit(_run_one, configs[p], e, gateway): (p, e)
                   for p, e in tasks}
        for future, (p, e) in futures.items():
            transcripts_by[(p, e.episode_id)] = future.result()
    transcripts = [transcripts_by[(p, e.episode_id)] for p, e in tasks]

    classifier = ClassifierConfig()
    run_info = {
        "manifest": str(spec.manifest_path),
        "pipelines": list(spec.pipelines),
        "conditions": [c.id for c in manifest.conditions
                       if conditions is None or c.id in conditions],
        "cache_mode": spec.cache_mode,
        "classifier": classifier.mode,
        "episodes_selected": len(episodes),
        "episodes_run": len(transcripts),
        "unavailable_episodes": unavailable,
    }
    summary = _write_outputs(spec.out_dir, manifest, transcripts, classifier,
                             run_info)
    summary["unavailable_episodes"] = unavailable

    missing = sorted({t.error.split("fingerprint ", 1)[1]
                      for t in transcripts
                      if t.status == "failed" and t.error
                      and "no cached response for fingerprint " in t.error})
    if missing:
        print("strict replay misses:", file=sys.stderr)
        for fingerprint in missing:
            print(f"  {fingerprint}", file=sys.stderr)

    _emit(summary, args.json)
    return 0 if not summary["failed_episodes"] else 1


def finalize_ingested_frames(out_dir: str | Path, fps: float) -> int:
    """Rename ffmpeg's sequential ``raw_NNNNNN.png`` dumps to the
    ``frame_{t_ms}.png`` naming the manifest loader expects."""
    out_dir = Path(out_dir)
    renamed = 0
    for raw in sorted(out_dir.glob("raw_*.png")):
        index = int(raw.stem.split("_", 1)[1])
        t_ms = int(round(index * 1000.0 / fps))
        raw.rename(out_dir / f"frame_{t_ms}.png")
        renamed += 1
    return renamed


def cmd_ingest(args: argparse.Namespace, parser: argparse.ArgumentParser) -> int:
    out_dir = Path(args.out_dir)
    command = INGEST_COMMAND.format(video=args.video, fps=args.fps,
                                    out_dir=out_dir)
    if args.print_only:
        print(command)
        print(f"# then: overture ingest {args.video} {out_dir} "
              f"--fps {args.fps}  (renames raw_*.png to frame_{{t_ms}}.png)")
        return 0

    out_dir.mkdir(parents=True, exist_ok=True)
    if not list(out_dir.glob("raw_*.png")):
        if shutil.which("ffmpeg") is None:
            print("error: ffmpeg not found; run this yourself, then re-run "
                  "ingest to finalize:", file=sys.stderr)
            print(f"  {command}", file=sys.stderr)
            return 1
        proc = subprocess.run(command, shell=True)
        if proc.returncode != 0:
            print(f"error: ffmpeg exited with {proc.returncode}",
                  file=sys.stderr)
            return 1
    renamed = finalize_ingested_frames(out_dir, args.fps)
    _emit({"out_dir": str(out_dir), "frames": renamed}, args.json)
    return 0


def cmd_cache(args: argparse.Namespace, parser: argparse.ArgumentParser) -> int:
    cache = ResponseCache(args.cache)
    if args.cache_cmd == "stats":
        doc = cache.stats()
        doc["path"] = str(args.cache)
        _emit(doc, args.json)
        return 0
    removed = cache.purge()
    _emit({"removed": removed, "path": str(args.cache)}, args.json)
    return 0


def cmd_report(args: argparse.Namespace, parser: argparse.ArgumentParser) -> int:
    manifest_path = Path(args.manifest) if args.manifest \
        else default_manifest_path()
    try:
        manifest = load_manifest(manifest_path)
    except ManifestError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1

    source = Path(args.transcripts)
    files = sorted(source.glob("transcripts_*.jsonl")) \
        if source.is_dir() else [source]
    transcripts = []
    for f in files:
        transcripts.extend(load_transcripts_jsonl(f))
    if not transcripts:
        print(f"error: no transcripts found under {source}", file=sys.stderr)
        return 1

    out_dir = Path(args.out)
    run_info = {
        "manifest": str(manifest_path),
        "transcripts": [str(f) for f in files],
        "classifier": "rules",
        "episodes_run": len(transcripts),
    }
    classifier = ClassifierConfig()
    results = _aggregate_all(manifest, transcripts, classifier)
    if not results:
        print("error: transcripts reference no manifest condition",
              file=sys.stderr)
        return 1
    out_dir.mkdir(parents=True, exist_ok=True)
    report = render_report(results, transcripts=transcripts,
                           generated_at=_utc_now(), run_info=run_info)
    (out_dir / "report.md").write_text(report, encoding="utf-8")
    (out_dir / "report.csv").write_text(render_csv(results), encoding="utf-8")
    (out_dir / "evidence.jsonl").write_text(evidence_jsonl(results),
                                            encoding="utf-8")
    failed = sorted(t.episode_id for t in transcripts if t.status == "failed")
    _emit({"report": str(out_dir / "report.md"),
           "episodes": len(transcripts), "failed_episodes": failed},
          args.json)
    return 0 if not failed else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="overture",
        description="Decide how a robot should open an interaction, and "
                    "evaluate the four decision pipelines.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--backends", type=Path, default=None,
                       help="backend config JSON (default: scripted)")
        p.add_argument("--cache", type=Path, default=None,
                       help="response cache directory")
        p.add_argument("--cache-mode", choices=_CACHE_MODE_CHOICES,
                       default="passthrough")
        p.add_argument("--json", action="store_true",
                       help="print one JSON document to stdout")

    p = sub.add_parser("decide", help="run one single-round decision")
    p.add_argument("--pipeline", required=True, choices=("A", "B", "C", "D"))
    p.add_argument("--robot-situation", "-u", required=True,
                   help="what the robot is doing, as one sentence")
    p.add_argument("--image", type=Path, default=None,
                   help="camera frame (pipelines B, C, D)")
    p.add_argument("--pose", nargs="*", default=None, metavar="KEY=VAL",
                   help="head pose, e.g. --pose yaw=0 pitch=0 (pipelines A, C)")
    common(p)
    p.set_defaults(func=cmd_decide)

    p = sub.add_parser("eval", help="run the evaluation protocol")
    p.add_argument("--manifest", type=Path, default=None,
                   help="test manifest (default: bundled protocol manifest)")
    p.add_argument("--pipelines", default=None,
                   help="e.g. A,B,C,D or ACD (default: all)")
    p.add_argument("--conditions", default=None,
                   help="comma-separated condition ids (default: all)")
    p.add_argument("--out", type=Path, required=True,
                   help="output directory for transcripts and reports")
    p.add_argument("--jobs", type=int, default=4,
                   help="parallel episodes (default 4)")
    common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ingest",
                       help="decode a video into the frame-directory layout")
    p.add_argument("video", help="source video file")
    p.add_argument("out_dir", help="frame directory to create")
    p.add_argument("--fps", type=float, default=10.0,
                   help="decoded frames per second (default 10)")
    p.add_argument("--print-only", action="store_true",
                   help="print the ffmpeg command instead of running it")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("cache", help="inspect or clear the response cache")
    p.add_argument("cache_cmd", choices=("stats", "purge"))
    p.add_argument("--cache", type=Path, required=True)
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_cache)

    p = sub.add_parser("report", help="re-render reports from transcripts")
    p.add_argument("--transcripts", type=Path, required=True,
                   help="transcript JSONL file or directory of them")
    p.add_argument("--manifest", type=Path, default=None)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_report)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    return args.func(args, parser)


if __name__ == "__main__":
    sys.exit(main())
