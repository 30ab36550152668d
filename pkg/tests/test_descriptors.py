import pytest
from hypothesis import given, strategies as st

from overture.descriptors import (
    LOOKING_AWAY,
    LOOKING_TOWARD,
    NO_PERSON,
    DescriptorError,
    GazeThresholds,
    combine,
    describe_image,
    gaze_sentence,
    is_multi_sentence,
    run_descriptor,
)
from overture.domain import Observation, PoseAnnotation
from overture.gateway import Gateway

from conftest import scripted_backends


def _pose(yaw=0.0, pitch=0.0, roll=0.0):
    return PoseAnnotation(face_detected=True, yaw_deg=yaw, pitch_deg=pitch,
                          roll_deg=roll, face_area_frac=0.1)


DEFAULT = GazeThresholds()


class TestGazeSentence:
    def test_frontal_face_is_toward(self):
        assert gaze_sentence(_pose(), DEFAULT) == LOOKING_TOWARD

    def test_no_face(self):
        assert gaze_sentence(PoseAnnotation(face_detected=False), DEFAULT) \
            == NO_PERSON

    def test_boundary_is_inside_the_cone(self):
        assert gaze_sentence(_pose(yaw=30.0), DEFAULT) == LOOKING_TOWARD
        assert gaze_sentence(_pose(yaw=30.0001), DEFAULT) == LOOKING_AWAY
        assert gaze_sentence(_pose(pitch=25.0), DEFAULT) == LOOKING_TOWARD
        assert gaze_sentence(_pose(pitch=-25.0001), DEFAULT) == LOOKING_AWAY

    def test_both_axes_must_be_inside(self):
        assert gaze_sentence(_pose(yaw=10.0, pitch=60.0), DEFAULT) \
            == LOOKING_AWAY
        assert gaze_sentence(_pose(yaw=60.0, pitch=10.0), DEFAULT) \
            == LOOKING_AWAY

    def test_sign_symmetric(self):
        assert gaze_sentence(_pose(yaw=-29.0), DEFAULT) == LOOKING_TOWARD
        assert gaze_sentence(_pose(yaw=-31.0), DEFAULT) == LOOKING_AWAY

    def test_roll_never_matters(self):
        assert gaze_sentence(_pose(roll=90.0), DEFAULT) == LOOKING_TOWARD
        assert gaze_sentence(_pose(yaw=80.0, roll=90.0), DEFAULT) \
            == LOOKING_AWAY

    def test_custom_thresholds(self):
        tight = GazeThresholds(yaw_max_deg=15.0, pitch_max_deg=15.0)
        assert gaze_sentence(_pose(yaw=20.0), tight) == LOOKING_AWAY
        assert gaze_sentence(_pose(yaw=20.0), DEFAULT) == LOOKING_TOWARD

    @given(yaw=st.floats(-180, 180, allow_nan=False),
           pitch=st.floats(-180, 180, allow_nan=False),
           roll=st.floats(-180, 180, allow_nan=False))
    def test_always_one_of_three_sentences(self, yaw, pitch, roll):
        s = gaze_sentence(_pose(yaw, pitch, roll), DEFAULT)
        assert s in (LOOKING_TOWARD, LOOKING_AWAY, NO_PERSON)


class TestGazeThresholds:
    @pytest.mark.parametrize("bad", [0.0, -5.0, 90.1, 1000.0])
    def test_rejects_out_of_range(self, bad):
        with pytest.raises(ValueError):
            GazeThresholds(yaw_max_deg=bad)
        with pytest.raises(ValueError):
            GazeThresholds(pitch_max_deg=bad)

    def test_accepts_edge(self):
        GazeThresholds(yaw_max_deg=90.0, pitch_max_deg=0.0001)


class TestMultiSentence:
    @pytest.mark.parametrize("text,expected", [
        ("A person is reading a book.", False),
        ("A person reads. They look tired.", True),
        ("Is anyone there? Yes.", True),
        ("A person holds a 1.5 liter bottle.", False),
        ("One sentence with no final period", False),
        ("Trailing period. ", False),
    ])
    def test_examples(self, text, expected):
        assert is_multi_sentence(text) is expected


class TestCombine:
    def test_gaze_comes_first(self):
        s = combine(LOOKING_AWAY, "A person is typing.")
        assert s.text == \
            "The person is looking away from the robot. A person is typing."
        assert s.source == "combined"

    def test_rejects_empty_parts(self):
        with pytest.raises(DescriptorError):
            combine("", "x")
        with pytest.raises(DescriptorError):
            combine("x", "")


@pytest.fixture
def frame_obs(tmp_path):
    from overture.domain import frame_ref_for_bytes
    data = b"\x89PNG fake frame"
    f = tmp_path / "frame_0.png"
    f.write_bytes(data)
    return Observation(frame_ref=frame_ref_for_bytes(data), timestamp_s=0.0,
                       pose=_pose(yaw=70.0), source_path=str(f))


class TestDescribeImage:
    def test_reply_collapsed_to_one_line(self, tmp_path):
        backends = scripted_backends({"descriptor": [
            {"if_contains": "Return only one sentence.",
             "reply": "  A person \n is  waving. "}]})
        gw = Gateway(backends, mode="passthrough")
        out = describe_image(b"bytes", gw, "descriptor")
        assert out.sentence == "A person is waving."
        assert out.multi_sentence is False

    def test_multi_sentence_flagged_not_truncated(self):
        backends = scripted_backends({"descriptor": [
            {"if_contains": "Return only one sentence.",
             "reply": "A person waves. They smile."}]})
        gw = Gateway(backends, mode="passthrough")
        out = describe_image(b"bytes", gw, "descriptor")
        assert out.sentence == "A person waves. They smile."
        assert out.multi_sentence is True

    def test_empty_reply_is_an_error(self):
        backends = scripted_backends({"descriptor": [
            {"if_contains": "Return only one sentence.", "reply": "   "}]})
        gw = Gateway(backends, mode="passthrough")
        with pytest.raises(DescriptorError, match="empty"):
            describe_image(b"bytes", gw, "descriptor")

    def test_outbound_prompt_is_the_fixture(self, recording_gateway):
        from overture.promptlib import descriptor_prompt_text
        describe_image(b"bytes", recording_gateway, "descriptor")
        (request,) = recording_gateway.seen
        (message,) = request.messages
        text_parts = [p for p in message.parts if hasattr(p, "text")]
        assert text_parts[0].text == descriptor_prompt_text()


class TestRunDescriptor:
    def test_pipeline_a_uses_only_pose(self, frame_obs, scripted_gateway):
        out = run_descriptor("A", frame_obs, scripted_gateway, DEFAULT)
        assert out.situation.text == LOOKING_AWAY
        assert out.situation.source == "gaze_only"
        assert out.latency_ms == 0

    def test_pipeline_a_without_pose(self, frame_obs, scripted_gateway):
        bare = Observation(frame_ref=frame_obs.frame_ref, timestamp_s=0.0,
                           source_path=frame_obs.source_path)
        with pytest.raises(DescriptorError, match="pose"):
            run_descriptor("A", bare, scripted_gateway, DEFAULT)

    def test_pipeline_b_describes_frame(self, frame_obs, scripted_gateway):
        out = run_descriptor("B", frame_obs, scripted_gateway, DEFAULT)
        assert out.situation.source == "vlm_only"
        assert out.situation.text

    def test_pipeline_c_concatenates(self, frame_obs, scripted_gateway):
        b = run_descriptor("B", frame_obs, scripted_gateway, DEFAULT)
        c = run_descriptor("C", frame_obs, scripted_gateway, DEFAULT)
        assert c.situation.text == f"{LOOKING_AWAY} {b.situation.text}"
        assert c.situation.source == "combined"

    def test_pipeline_d_refuses(self, frame_obs, scripted_gateway):
        with pytest.raises(DescriptorError, match="raw image"):
            run_descriptor("D", frame_obs, scripted_gateway, DEFAULT)

    def test_unknown_pipeline(self, frame_obs, scripted_gateway):
        with pytest.raises(DescriptorError, match="unknown"):
            run_descriptor("E", frame_obs, scripted_gateway, DEFAULT)

    def test_missing_frame_bytes(self, scripted_gateway, tmp_path):
        obs = Observation(frame_ref="missing:jpl/c1", timestamp_s=0.0,
                          pose=_pose())
        with pytest.raises(DescriptorError, match="unavailable"):
            run_descriptor("B", obs, scripted_gateway, DEFAULT)


def test_scripted_descriptions_are_keyed_on_frame_bytes(scripted_gateway):
    # Same bytes, same sentence: the replay design leans on this.
    a1 = describe_image(b"frame-a", scripted_gateway, "descriptor").sentence
    a2 = describe_image(b"frame-a", scripted_gateway, "descriptor").sentence
    assert a1 == a2
