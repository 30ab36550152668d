import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from PIL import Image

from overture.domain import Observation, PoseAnnotation
from overture.testset import (
    DEFAULT_INTERVAL_S,
    MIN_PAIR_SPACING_S,
    ManifestError,
    PoseFileError,
    Segment,
    blur_score,
    default_manifest_path,
    episode_id_for,
    expand,
    extract_frames,
    list_frame_files,
    load_manifest,
    load_pose_annotations,
    select_egocom_frames,
)
from overture.testset import MediaEntry


def _min_doc(**overrides) -> dict:
    doc = {
        "version": 1,
        "roots": {"jpl": "jpl", "egocom": "egocom", "stanford": "stanford"},
        "media": [{"dataset": "jpl", "file_id": "c1", "role": "true_set"}],
        "conditions": [{
            "id": "T1",
            "robot_situation": "Carry a box to the next room.",
            "selector": [{"dataset": "jpl", "role": "true_set"}],
        }],
    }
    doc.update(overrides)
    return doc


def _write_manifest(tmp_path, doc) -> str:
    p = tmp_path / "manifest.json"
    p.write_text(json.dumps(doc), encoding="utf-8")
    return p


class TestLoadManifest:
    def test_default_manifest_loads(self):
        m = load_manifest(default_manifest_path())
        assert m.version == 1
        assert [c.id for c in m.conditions] == \
            ["T1", "T2", "T2'", "T3", "T4", "T3'", "T3''"]
        assert len(m.media) == 42
        assert m.condition("T1").rubric == "assist"
        assert m.condition("T3''").rubric == "speak"
        assert m.condition("T2").expectation == "expect_decline"
        assert m.condition("T2'").expectation == "open"
        assert m.condition("T4").robot_situation.urgency_hint == "urgent"

    def test_missing_file(self, tmp_path):
        with pytest.raises(ManifestError, match="not found"):
            load_manifest(tmp_path / "nope.json")

    def test_invalid_json(self, tmp_path):
        p = tmp_path / "manifest.json"
        p.write_text("{not json", encoding="utf-8")
        with pytest.raises(ManifestError, match="not valid JSON"):
            load_manifest(p)

    def test_wrong_version(self, tmp_path):
        p = _write_manifest(tmp_path, _min_doc(version=2))
        with pytest.raises(ManifestError, match=r"\$\.version"):
            load_manifest(p)

    def test_unknown_condition_id(self, tmp_path):
        doc = _min_doc()
        doc["conditions"][0]["id"] = "T9"
        p = _write_manifest(tmp_path, doc)
        with pytest.raises(ManifestError, match=r"conditions\[0\]"):
            load_manifest(p)

    def test_bad_segment_shape(self, tmp_path):
        doc = _min_doc()
        doc["media"][0]["segment"] = {"half": "middle"}
        p = _write_manifest(tmp_path, doc)
        with pytest.raises(ManifestError, match=r"media\[0\]"):
            load_manifest(p)

    def test_degenerate_segment_range(self, tmp_path):
        doc = _min_doc()
        doc["media"][0]["segment"] = {"start_s": 5, "end_s": 5}
        p = _write_manifest(tmp_path, doc)
        with pytest.raises(ManifestError, match=r"media\[0\]\.segment"):
            load_manifest(p)

    def test_duplicate_condition_ids(self, tmp_path):
        doc = _min_doc()
        doc["conditions"] = doc["conditions"] * 2
        p = _write_manifest(tmp_path, doc)
        with pytest.raises(ManifestError, match="duplicate"):
            load_manifest(p)

    def test_relative_roots_resolve_against_manifest_dir(self, tmp_path):
        sub = tmp_path / "bundle"
        sub.mkdir()
        (sub / "jpl").mkdir()
        p = _write_manifest(sub, _min_doc())
        m = load_manifest(p)
        assert m.roots["jpl"] == sub / "jpl"
        assert not any("jpl" in w and "root" in w for w in m.warnings)

    def test_absolute_roots_kept(self, tmp_path):
        doc = _min_doc(roots={"jpl": str(tmp_path), "egocom": str(tmp_path),
                              "stanford": str(tmp_path)})
        m = load_manifest(_write_manifest(tmp_path, doc))
        assert m.roots["jpl"] == tmp_path

    def test_missing_roots_and_media_warn(self, tmp_path):
        m = load_manifest(_write_manifest(tmp_path, _min_doc()))
        assert any(w.startswith("dataset root missing: jpl") for w in m.warnings)
        assert any(w == "media missing: jpl/c1" for w in m.warnings)


class TestSegment:
    def test_needs_exactly_one_form(self):
        with pytest.raises(ValueError):
            Segment()
        with pytest.raises(ValueError):
            Segment(half="first", start_s=1.0, end_s=2.0)
        with pytest.raises(ValueError):
            Segment(start_s=1.0)

    def test_validates_values(self):
        with pytest.raises(ValueError):
            Segment(half="middle")
        with pytest.raises(ValueError):
            Segment(start_s=-1.0, end_s=2.0)
        with pytest.raises(ValueError):
            Segment(start_s=2.0, end_s=2.0)

    def test_labels(self):
        assert Segment(half="first").label() == "first-half"
        assert Segment(half="second").label() == "second-half"
        assert Segment(start_s=0.5, end_s=2.0).label() == "0.5-2s"

    def test_resolve(self):
        assert Segment(half="first").resolve(20.0) == (0.0, 10.0)
        assert Segment(half="second").resolve(20.0) == (10.0, 20.0)
        assert Segment(start_s=3.0, end_s=9.0).resolve(20.0) == (3.0, 9.0)
        # explicit end clamps to the actual duration
        assert Segment(start_s=3.0, end_s=90.0).resolve(20.0) == (3.0, 20.0)

    def test_dict_round_trip(self):
        for seg in (Segment(half="second"), Segment(start_s=1.5, end_s=4.0)):
            assert Segment.from_dict(seg.to_dict()) == seg


def make_frame_dir(tmp_path, times_ms, poses=None, name="vid"):
    d = tmp_path / name
    d.mkdir()
    for t in times_ms:
        (d / f"frame_{t}.png").write_bytes(b"frame-%d" % t)
    if poses is not None:
        (d / "poses.json").write_text(
            json.dumps({"version": 1, "frames": poses}), encoding="utf-8")
    return d


class TestListFrameFiles:
    def test_sorted_by_timestamp_and_filtered(self, tmp_path):
        d = make_frame_dir(tmp_path, [3000, 0, 1500])
        (d / "notes.txt").write_text("x")
        (d / "frame_12x.png").write_bytes(b"bad name")
        (d / "frame_0.jpeg").write_bytes(b"wrong extension")
        frames = list_frame_files(d)
        assert [t for t, _ in frames] == [0, 1500, 3000]


class TestExtractFrames:
    def test_grid_over_whole_video(self, tmp_path):
        d = make_frame_dir(tmp_path, list(range(0, 10001, 1000)))
        obs = extract_frames(d)
        assert [o.timestamp_s for o in obs] == [0.0, 1.5, 3.0, 4.5, 6.0, 7.5, 9.0]
        # each tick maps to the latest frame at or before it
        names = [o.source_path.rsplit("/", 1)[1] for o in obs]
        assert names == ["frame_0.png", "frame_1000.png", "frame_3000.png",
                         "frame_4000.png", "frame_6000.png", "frame_7000.png",
                         "frame_9000.png"]

    def test_end_is_inclusive(self, tmp_path):
        d = make_frame_dir(tmp_path, [0, 1500, 3000])
        obs = extract_frames(d)
        assert [o.timestamp_s for o in obs] == [0.0, 1.5, 3.0]

    def test_second_half_timestamps_are_video_absolute(self, tmp_path):
        d = make_frame_dir(tmp_path, list(range(0, 20001, 1000)))
        obs = extract_frames(d, segment=Segment(half="second"))
        assert [o.timestamp_s for o in obs] == \
            [10.0, 11.5, 13.0, 14.5, 16.0, 17.5, 19.0]

    def test_explicit_segment_clamped(self, tmp_path):
        d = make_frame_dir(tmp_path, list(range(0, 20001, 1000)))
        obs = extract_frames(d, segment=Segment(start_s=18.0, end_s=25.0))
        assert [o.timestamp_s for o in obs] == [18.0, 19.5]

    def test_empty_dir_or_segment(self, tmp_path):
        empty = tmp_path / "empty"
        empty.mkdir()
        with pytest.raises(ValueError, match="no frames"):
            extract_frames(empty)
        single = make_frame_dir(tmp_path, [0], name="single")
        with pytest.raises(ValueError, match="empty segment"):
            extract_frames(single, segment=Segment(half="first"))

    def test_rejects_bad_interval(self, tmp_path):
        d = make_frame_dir(tmp_path, [0, 1500])
        with pytest.raises(ValueError, match="interval"):
            extract_frames(d, interval_s=0.0)

    def test_poses_attached_by_frame_name(self, tmp_path):
        pose = {"face_detected": True, "yaw_deg": 10.0, "pitch_deg": 0.0,
                "roll_deg": 0.0, "face_area_frac": 0.2}
        d = make_frame_dir(tmp_path, [0, 1500],
                           poses={"frame_0.png": pose})
        obs = extract_frames(d)
        assert obs[0].pose == PoseAnnotation.from_dict(pose)
        assert obs[1].pose is None

    def test_refs_are_content_hashes(self, tmp_path):
        d = make_frame_dir(tmp_path, [0, 1500])
        obs = extract_frames(d)
        assert all(o.frame_ref.startswith("sha256:") for o in obs)
        assert obs[0].frame_ref != obs[1].frame_ref

    @given(duration_ticks=st.integers(1, 40), interval=st.sampled_from(
        [0.5, 1.0, 1.5, 2.0]))
    @settings(max_examples=30, deadline=None)
    def test_grid_spacing_property(self, tmp_path_factory, duration_ticks,
                                   interval):
        tmp = tmp_path_factory.mktemp("grid")
        d = make_frame_dir(tmp, [0, duration_ticks * 500])
        obs = extract_frames(d, interval_s=interval)
        times = [o.timestamp_s for o in obs]
        deltas = [b - a for a, b in zip(times, times[1:])]
        assert all(abs(dt - interval) < 1e-6 for dt in deltas)
        assert times[0] == 0.0
        assert times[-1] <= duration_ticks * 0.5 + 1e-9


class TestBlurScore:
    def test_constant_image_scores_zero(self):
        assert blur_score(np.full((16, 16), 128.0)) == 0.0

    def test_checkerboard_beats_constant(self):
        board = np.indices((16, 16)).sum(axis=0) % 2 * 255.0
        assert blur_score(board) > 0.0

    def test_blurring_strictly_lowers_the_score(self):
        rng = np.random.default_rng(7)
        sharp = rng.uniform(0, 255, size=(32, 32))
        kernel = np.ones((5, 5)) / 25.0
        padded = np.pad(sharp, 2, mode="reflect")
        blurred = np.zeros_like(sharp)
        for i in range(32):
            for j in range(32):
                blurred[i, j] = (padded[i:i + 5, j:j + 5] * kernel).sum()
        assert blur_score(blurred) < blur_score(sharp)

    def test_degenerate_shapes_score_zero(self):
        assert blur_score(np.zeros((1, 16))) == 0.0
        assert blur_score(np.zeros((16, 1))) == 0.0

    def test_empty_image_is_an_error(self):
        with pytest.raises(ValueError, match="empty"):
            blur_score(np.zeros((0, 0)))

    def test_png_bytes_match_array_score(self, tmp_path):
        rng = np.random.default_rng(3)
        arr = rng.integers(0, 256, size=(24, 24), dtype=np.uint8)
        p = tmp_path / "img.png"
        Image.fromarray(arr, mode="L").save(p)
        assert blur_score(p.read_bytes()) == pytest.approx(
            blur_score(arr.astype(np.float64)))
        assert blur_score(p) == pytest.approx(blur_score(arr.astype(np.float64)))

    def test_undecodable_bytes(self):
        with pytest.raises(ValueError, match="undecodable"):
            blur_score(b"definitely not an image")

    def test_rgb_uses_luminance_weights(self):
        rgb = np.zeros((8, 8, 3))
        rgb[..., 1] = np.indices((8, 8)).sum(axis=0) % 2 * 100.0
        gray = 0.587 * rgb[..., 1]
        assert blur_score(rgb) == pytest.approx(blur_score(gray))


def _obs(t: float) -> Observation:
    return Observation(frame_ref=f"sha256:{t}", timestamp_s=t)


class TestSelectEgocomFrames:
    def test_prefers_pair_with_sharpest_blurrier_member(self):
        scored = [(_obs(0.0), 5.0), (_obs(0.5), 1.0), (_obs(1.0), 9.0)]
        first, second = select_egocom_frames(scored)
        assert (first.timestamp_s, second.timestamp_s) == (0.0, 1.0)

    def test_spacing_is_strict(self):
        scored = [(_obs(0.0), 5.0), (_obs(0.75), 9.0)]
        with pytest.raises(ValueError, match="spacing"):
            select_egocom_frames(scored)
        first, second = select_egocom_frames(
            [(_obs(0.0), 5.0), (_obs(0.751), 9.0)])
        assert (first.timestamp_s, second.timestamp_s) == (0.0, 0.751)

    def test_all_equal_scores_pick_earliest_pair(self):
        scored = [(_obs(t), 4.0) for t in (0.0, 1.0, 2.0, 3.0)]
        first, second = select_egocom_frames(scored)
        assert (first.timestamp_s, second.timestamp_s) == (0.0, 1.0)

    def test_tie_breaks_on_second_timestamp(self):
        scored = [(_obs(0.0), 9.0), (_obs(1.0), 9.0), (_obs(2.0), 9.0),
                  (_obs(3.0), 1.0)]
        first, second = select_egocom_frames(scored)
        assert (first.timestamp_s, second.timestamp_s) == (0.0, 1.0)

    def test_input_order_does_not_matter(self):
        scored = [(_obs(2.0), 3.0), (_obs(0.0), 5.0), (_obs(1.0), 1.0)]
        assert select_egocom_frames(scored) == \
            select_egocom_frames(list(reversed(scored)))

    def test_fewer_than_two_frames(self):
        with pytest.raises(ValueError):
            select_egocom_frames([(_obs(0.0), 5.0)])
        with pytest.raises(ValueError):
            select_egocom_frames([])

    @given(scores=st.lists(st.floats(0, 1000, allow_nan=False),
                           min_size=2, max_size=8))
    @settings(max_examples=60)
    def test_matches_brute_force_oracle(self, scores):
        scored = [(_obs(i * 0.5), s) for i, s in enumerate(scores)]
        expected = _oracle_pair(scored, MIN_PAIR_SPACING_S)
        if expected is None:
            with pytest.raises(ValueError):
                select_egocom_frames(scored)
        else:
            assert select_egocom_frames(scored) == expected


def _oracle_pair(scored, min_spacing):
    """Independent restatement of the selection rule: maximize the pair's
    weaker sharpness, break ties by earliest timestamps."""
    admissible = []
    ordered = sorted(scored, key=lambda p: p[0].timestamp_s)
    for i, (o1, s1) in enumerate(ordered):
        for o2, s2 in ordered[i + 1:]:
            if o2.timestamp_s - o1.timestamp_s > min_spacing:
                admissible.append((o1, o2, min(s1, s2)))
    if not admissible:
        return None
    best = max(m for _, _, m in admissible)
    candidates = [(o1, o2) for o1, o2, m in admissible if m == best]
    return min(candidates,
               key=lambda p: (p[0].timestamp_s, p[1].timestamp_s))


class TestPoseAnnotations:
    def test_round_trip(self, tmp_path):
        p = tmp_path / "poses.json"
        p.write_text(json.dumps({"version": 1, "frames": {
            "frame_0.png": {"face_detected": False},
            "frame_1500.png": {"face_detected": True, "yaw_deg": 5.0,
                               "pitch_deg": -3.0, "roll_deg": 0.0,
                               "face_area_frac": 0.1},
        }}))
        poses = load_pose_annotations(p)
        assert poses["frame_0.png"].face_detected is False
        assert poses["frame_1500.png"].yaw_deg == 5.0

    def test_rejects_wrong_version(self, tmp_path):
        p = tmp_path / "poses.json"
        p.write_text(json.dumps({"version": 2, "frames": {}}))
        with pytest.raises(PoseFileError, match="version"):
            load_pose_annotations(p)

    def test_rejects_broken_frame_entry(self, tmp_path):
        p = tmp_path / "poses.json"
        p.write_text(json.dumps({"version": 1, "frames": {
            "frame_0.png": {"face_detected": True}}}))
        with pytest.raises(PoseFileError, match="frame_0.png"):
            load_pose_annotations(p)

    def test_unreadable_file(self, tmp_path):
        with pytest.raises(PoseFileError, match="unreadable"):
            load_pose_annotations(tmp_path / "gone.json")


class TestEpisodeId:
    def test_plain_and_segmented(self):
        plain = MediaEntry(dataset="jpl", file_id="c1", role="true_set")
        assert episode_id_for("T1", plain) == "T1/jpl/c1#true"
        cut = MediaEntry(dataset="jpl", file_id="c30", role="false_set",
                         segment=Segment(half="first"))
        assert episode_id_for("T1", cut) == "T1/jpl/c30/first-half#false"


class TestExpand:
    def test_mini_dataset_shape(self, mini_episodes):
        ids = [e.episode_id for e in mini_episodes]
        assert ids == [
            "T1/jpl/wave_vid#true",
            "T1/jpl/ignore_vid#false",
            "T2/jpl/wave_vid#true",
            "T3/egocom/talk_vid#true",
            "T3/stanford/phone_img#false",
            "T4/stanford/phone_img#false",
        ]
        assert all(e.available for e in mini_episodes)
        assert all(e.warnings == () for e in mini_episodes)

    def test_expected_outcomes_cover_the_derivation_rule(self, mini_episodes):
        expected = {e.episode_id: e.expected for e in mini_episodes}
        assert expected == {
            "T1/jpl/wave_vid#true": "agree",
            "T1/jpl/ignore_vid#false": "decline",   # control within T1
            "T2/jpl/wave_vid#true": "decline",      # busy robot declines
            "T3/egocom/talk_vid#true": "agree",
            "T3/stanford/phone_img#false": "decline",
            "T4/stanford/phone_img#false": "agree",  # urgent overrides
        }

    def test_video_pair_keeps_two_sharpest_spaced_frames(self, mini_episodes):
        talk = next(e for e in mini_episodes
                    if e.episode_id == "T3/egocom/talk_vid#true")
        assert [o.timestamp_s for o in talk.observations] == [0.0, 1.8]

    def test_image_episode_one_observation(self, mini_episodes):
        img = next(e for e in mini_episodes
                   if e.episode_id == "T3/stanford/phone_img#false")
        assert len(img.observations) == 1
        assert img.observations[0].timestamp_s == 0.0
        assert img.observations[0].pose is not None

    def test_sibling_conditions_share_frames(self, mini_episodes):
        by_id = {e.episode_id: e for e in mini_episodes}
        t1 = by_id["T1/jpl/wave_vid#true"]
        t2 = by_id["T2/jpl/wave_vid#true"]
        assert [o.frame_ref for o in t1.observations] == \
            [o.frame_ref for o in t2.observations]

    def test_condition_filter(self, mini_manifest):
        assert [e.episode_id for e in expand(mini_manifest, ["T1"])] == \
            ["T1/jpl/wave_vid#true", "T1/jpl/ignore_vid#false"]

    def test_order_stable(self, mini_manifest):
        a = [e.episode_id for e in expand(mini_manifest)]
        b = [e.episode_id for e in expand(mini_manifest)]
        assert a == b

    def test_missing_datasets_degrade_to_unavailable(self, tmp_path,
                                                     mini_manifest_path):
        doc = json.loads(mini_manifest_path.read_text())
        p = _write_manifest(tmp_path, doc)  # roots now dangle
        manifest = load_manifest(p)
        assert manifest.warnings
        episodes = expand(manifest)
        assert len(episodes) == 6
        assert all(not e.available for e in episodes)
        for e in episodes:
            assert e.observations[0].frame_ref.startswith("missing:")
            assert e.warnings
