import json
from pathlib import Path

import pytest

from overture.gateway import BackendConfig, Gateway
from overture.miniset import generate_mini_dataset
from overture.testset import expand, load_manifest

DATA_DIR = Path(__file__).parent / "data"


def load_data(name: str) -> str:
    return (DATA_DIR / name).read_text(encoding="utf-8")


def load_json(name: str):
    return json.loads(load_data(name))


def scripted_backends(rules: dict[str, list] | None = None) -> dict[str, BackendConfig]:
    """Scripted descriptor/policy pair, optionally with per-backend rules."""
    rules = rules or {}
    return {bid: BackendConfig(backend_id=bid, kind="scripted",
                               rules=tuple(rules.get(bid, ())))
            for bid in ("descriptor", "policy")}


class RecordingGateway(Gateway):
    """Gateway that keeps every outbound request for inspection."""

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self.seen = []

    def complete(self, request):
        self.seen.append(request)
        return super().complete(request)


@pytest.fixture()
def scripted_gateway() -> Gateway:
    return Gateway(scripted_backends(), mode="passthrough")


@pytest.fixture()
def recording_gateway() -> RecordingGateway:
    return RecordingGateway(scripted_backends(), mode="passthrough")


@pytest.fixture(scope="session")
def mini_root(tmp_path_factory) -> Path:
    root = tmp_path_factory.mktemp("miniset")
    generate_mini_dataset(root)
    return root


@pytest.fixture(scope="session")
def mini_manifest_path(mini_root) -> Path:
    return mini_root / "manifest.json"


@pytest.fixture(scope="session")
def mini_manifest(mini_manifest_path):
    return load_manifest(mini_manifest_path)


@pytest.fixture(scope="session")
def mini_episodes(mini_manifest):
    return expand(mini_manifest)


@pytest.fixture()
def wave_episode(mini_episodes):
    """The three-observation engaged-person episode."""
    return next(e for e in mini_episodes
                if e.episode_id == "T1/jpl/wave_vid#true")
