"""Versioned prompt fixtures.

Each fixture is a UTF-8 text file holding one or more chat turns.  A line of
exactly ``<<<user>>>`` or ``<<<assistant>>>`` starts a turn; everything up to
the next header (or end of file) is that turn's text, minus the final
newline.  ``serialize_turns(parse_fixture(text)) == text`` holds for every
shipped fixture, which lets tests compare outbound requests against fixture
files byte for byte.
"""

from __future__ import annotations

import re
from importlib import resources

_HEADER = re.compile(r"^<<<(user|assistant)>>>$")

DESCRIPTOR_PROMPT = "descriptor_v1"
LLM_POLICY_PROMPT = "llm_policy_v1"
VLM_POLICY_PROMPT = "vlm_policy_v1"


class FixtureError(ValueError):
    pass


def parse_fixture(text: str) -> list[tuple[str, str]]:
    """Parse fixture text into ordered (role, turn_text) pairs."""
    turns: list[tuple[str, str]] = []
    role: str | None = None
    buf: list[str] = []
    for line in text.split("\n"):
        m = _HEADER.match(line)
        if m:
            if role is not None:
                turns.append((role, "\n".join(buf)))
            role = m.group(1)
            buf = []
        else:
            if role is None:
                raise FixtureError("fixture must start with a role header")
            buf.append(line)
    if role is None:
        raise FixtureError("fixture has no turns")
    # The file's trailing newline terminates the last turn's text.
    if buf and buf[-1] == "":
        buf.pop()
    turns.append((role, "\n".join(buf)))
    return turns


def serialize_turns(turns: list[tuple[str, str]]) -> str:
    return "".join(f"<<<{role}>>>\n{text}\n" for role, text in turns)


def fixture_text(name: str) -> str:
    """Raw bytes of a shipped fixture, decoded as UTF-8."""
    return (resources.files("overture.prompts")
            .joinpath(f"{name}.txt").read_text(encoding="utf-8"))


def fixture_turns(name: str) -> list[tuple[str, str]]:
    return parse_fixture(fixture_text(name))


def descriptor_prompt_text() -> str:
    """The single user-turn text sent with every image-description request."""
    turns = fixture_turns(DESCRIPTOR_PROMPT)
    return turns[0][1]
