import pytest
from hypothesis import given, strategies as st

from overture.promptlib import (
    DESCRIPTOR_PROMPT,
    LLM_POLICY_PROMPT,
    VLM_POLICY_PROMPT,
    FixtureError,
    descriptor_prompt_text,
    fixture_text,
    fixture_turns,
    parse_fixture,
    serialize_turns,
)

ALL_FIXTURES = (DESCRIPTOR_PROMPT, LLM_POLICY_PROMPT, VLM_POLICY_PROMPT,
                "judge_v1")


@pytest.mark.parametrize("name", ALL_FIXTURES)
def test_shipped_fixtures_round_trip_byte_exact(name):
    text = fixture_text(name)
    assert serialize_turns(parse_fixture(text)) == text


def test_parse_splits_roles_and_text():
    turns = parse_fixture("<<<user>>>\nhello\n\nworld\n<<<assistant>>>\nok\n")
    assert turns == [("user", "hello\n\nworld"), ("assistant", "ok")]


def test_parse_rejects_leading_prose():
    with pytest.raises(FixtureError):
        parse_fixture("hello\n<<<user>>>\nhi\n")


def test_parse_rejects_empty():
    with pytest.raises(FixtureError):
        parse_fixture("")


def test_header_must_fill_whole_line():
    turns = parse_fixture("<<<user>>>\nsay <<<assistant>>> inline\n")
    assert turns == [("user", "say <<<assistant>>> inline")]


def test_descriptor_prompt_is_single_user_turn():
    turns = fixture_turns(DESCRIPTOR_PROMPT)
    assert len(turns) == 1
    assert turns[0][0] == "user"
    assert descriptor_prompt_text() == turns[0][1]
    assert "Return only one sentence." in descriptor_prompt_text()


def test_policy_preambles_end_with_assistant_ack():
    for name in (LLM_POLICY_PROMPT, VLM_POLICY_PROMPT):
        turns = fixture_turns(name)
        roles = [r for r, _ in turns]
        assert roles == ["user", "assistant"]
        assert turns[1][1]  # the model's acknowledgement turn


def test_policy_preambles_request_dictionary_keys():
    llm = fixture_turns(LLM_POLICY_PROMPT)[0][1]
    vlm = fixture_turns(VLM_POLICY_PROMPT)[0][1]
    assert '"action" and "reason"' in llm
    assert '"action," "reason," and "image_description"' in vlm
    assert "image_description" not in llm


# Turn texts that cannot collide with the header syntax: no line consisting
# solely of a role header, and no trailing newline ambiguity beyond what the
# format resolves (a final blank line is the turn terminator).

_safe_text = st.lists(
    st.text(alphabet=st.characters(blacklist_characters="\n", blacklist_categories=("Cs",)),
            max_size=20).filter(lambda s: not s.startswith("<<<")),
    max_size=4).map("\n".join).filter(lambda s: not s.endswith("\n"))

_turns_st = st.lists(
    st.tuples(st.sampled_from(["user", "assistant"]), _safe_text),
    min_size=1, max_size=5)


@given(_turns_st)
def test_serialize_parse_round_trip(turns):
    assert parse_fixture(serialize_turns(turns)) == turns
