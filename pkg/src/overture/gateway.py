"""Uniform chat-completion client over an OpenAI-compatible wire protocol.

Three layers:

* request/response value types (``TextPart``/``ImagePart``/``ChatMessage``/
  ``ChatRequest``) with a stable content fingerprint,
* backends: a live HTTP backend with rate limiting and exponential backoff,
  and a scripted backend that answers from deterministic rules without any
  network I/O,
* a ``Gateway`` that routes role names to backends and wraps every call in a
  record/replay cache for reproducible runs.
"""

from __future__ import annotations

import base64
import hashlib
import json
import os
import tempfile
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import requests

ROLE_NAMES = ("user", "assistant", "system")
CACHE_MODES = ("record", "replay", "strict_replay", "passthrough")


class GatewayError(Exception):
    pass


class AuthError(GatewayError):
    pass


class TransportError(GatewayError):
    """Transient transport failure (connection, timeout, 5xx)."""


class RateLimitError(GatewayError):
    pass


class CacheMissError(GatewayError):
    def __init__(self, fingerprint: str):
        super().__init__(f"no cached response for fingerprint {fingerprint}")
        self.fingerprint = fingerprint


@dataclass(frozen=True)
class TextPart:
    text: str

    def to_dict(self) -> dict:
        return {"text": self.text}


@dataclass(frozen=True)
class ImagePart:
    media_type: str
    b64: str

    @classmethod
    def from_bytes(cls, data: bytes, media_type: str = "image/png") -> "ImagePart":
        return cls(media_type=media_type, b64=base64.b64encode(data).decode("ascii"))

    def to_dict(self) -> dict:
        return {"image": {"media_type": self.media_type, "b64": self.b64}}


Part = TextPart | ImagePart


@dataclass(frozen=True)
class ChatMessage:
    role: str
    parts: tuple[Part, ...]

    def __post_init__(self) -> None:
        if self.role not in ROLE_NAMES:
            raise ValueError(f"role must be one of {ROLE_NAMES}")
        if not self.parts:
            raise ValueError("message needs at least one part")
        if self.role != "user" and any(isinstance(p, ImagePart) for p in self.parts):
            raise ValueError("image parts may appear only in user turns")

    @classmethod
    def text(cls, role: str, text: str) -> "ChatMessage":
        return cls(role=role, parts=(TextPart(text),))

    def text_content(self) -> str:
        return "\n".join(p.text for p in self.parts if isinstance(p, TextPart))

    def image_parts(self) -> list[ImagePart]:
        return [p for p in self.parts if isinstance(p, ImagePart)]


@dataclass(frozen=True)
class ChatRequest:
    backend_id: str
    model_name: str
    messages: tuple[ChatMessage, ...]
    temperature: float = 0.0
    max_tokens: int = 1024

    def __post_init__(self) -> None:
        expected = "user"
        for m in self.messages:
            if m.role == "system":
                continue  # any leading system turn(s) sit outside the alternation
            if m.role != expected:
                raise ValueError("roles must alternate starting from user")
            expected = "assistant" if expected == "user" else "user"

    def last_user_text(self) -> str:
        for m in reversed(self.messages):
            if m.role == "user":
                return m.text_content()
        return ""

    def assistant_turns(self) -> int:
        return sum(1 for m in self.messages if m.role == "assistant")

    def image_part_count(self) -> int:
        return sum(len(m.image_parts()) for m in self.messages)


@dataclass(frozen=True)
class ChatResponse:
    text: str
    usage: dict = field(default_factory=dict)
    latency_ms: int = 0


def request_fingerprint(request: ChatRequest) -> str:
    """Stable content hash of a request.

    Covers everything that can change the model's answer (model name,
    decoding parameters, every message part); excludes transport and routing
    config (endpoint, timeouts, rate limits, backend id).  Image bytes enter
    the hash as their own sha256, not verbatim.
    """
    canon = {
        "model": request.model_name,
        "temperature": request.temperature,
        "max_tokens": request.max_tokens,
        "messages": [
            {
                "role": m.role,
                "parts": [
                    {"text": p.text} if isinstance(p, TextPart) else
                    {"image_sha256": hashlib.sha256(
                        base64.b64decode(p.b64)).hexdigest(),
                     "media_type": p.media_type}
                    for p in m.parts
                ],
            }
            for m in request.messages
        ],
    }
    payload = json.dumps(canon, sort_keys=True, separators=(",", ":"),
                         ensure_ascii=False).encode("utf-8")
    return hashlib.sha256(payload).hexdigest()


@dataclass(frozen=True)
class BackendConfig:
    """How to reach one model backend.

    ``kind`` is ``"openai"`` for a live OpenAI-compatible endpoint or
    ``"scripted"`` for the deterministic offline backend.
    """

    backend_id: str
    kind: str = "scripted"
    endpoint: str = ""
    model_name: str = "scripted-model"
    auth_env: str = ""
    auth_style: str = "bearer"  # "bearer" | "api-key"
    rate_limit_rpm: float = 60.0
    timeout_s: float = 60.0
    retry_budget: int = 3
    backoff_base_s: float = 0.5
    rules: tuple[dict, ...] = ()  # scripted backends only

    def __post_init__(self) -> None:
        if self.kind not in ("openai", "scripted"):
            raise ValueError("kind must be 'openai' or 'scripted'")
        if self.timeout_s <= 0:
            raise ValueError("timeout_s must be > 0")
        if self.rate_limit_rpm <= 0:
            raise ValueError("rate_limit_rpm must be > 0")

    @classmethod
    def from_dict(cls, backend_id: str, d: dict) -> "BackendConfig":
        return cls(
            backend_id=backend_id,
            kind=d.get("kind", "scripted"),
            endpoint=d.get("endpoint", ""),
            model_name=d.get("model_name", "scripted-model"),
            auth_env=d.get("auth_env", ""),
            auth_style=d.get("auth_style", "bearer"),
            rate_limit_rpm=float(d.get("rate_limit_rpm", 60.0)),
            timeout_s=float(d.get("timeout_s", 60.0)),
            retry_budget=int(d.get("retry_budget", 3)),
            backoff_base_s=float(d.get("backoff_base_s", 0.5)),
            rules=tuple(d.get("rules", ())),
        )


class _RateLimiter:
    """Serializes request starts so a backend never exceeds its requests/min."""

    def __init__(self, rpm: float):
        self._interval = 60.0 / rpm
        self._lock = threading.Lock()
        self._next_at = 0.0

    def acquire(self, sleep: Callable[[float], None] = time.sleep) -> None:
        while True:
            with self._lock:
                now = time.monotonic()
                if now >= self._next_at:
                    self._next_at = now + self._interval
                    return
                wait = self._next_at - now
            sleep(wait)


# Canned material for the scripted backend's built-in behavior.  Selection is
# keyed on content hashes so identical requests always get identical replies.
_SCRIPTED_DESCRIPTIONS = (
    "A person is walking toward the camera.",
    "A person is sitting and reading a book.",
    "A person is talking on a phone.",
    "A person is waving at the camera.",
    "A person is typing on a computer.",
)

_SCRIPTED_ENGAGE = {
    "action": "Approach the person and ask if they need assistance.",
    "reason": "The person is looking toward the robot, which signals openness to interact.",
}
_SCRIPTED_WAIT = {
    "action": "The robot should wait and keep observing.",
    "reason": "The person is looking away from the robot and shows no sign of engagement.",
}
_SCRIPTED_NOBODY = {
    "action": "The robot should continue with its task.",
    "reason": "No person is visible, so there is nobody to interact with.",
}
_SCRIPTED_SPEAK = {
    "action": "Say 'Excuse me, may I have a moment of your attention?'",
    "reason": "Engaging verbally is appropriate given the described situation.",
}


def _stable_index(seed: str, n: int) -> int:
    return int(hashlib.sha256(seed.encode("utf-8")).hexdigest()[:8], 16) % n


class ScriptedBackend:
    """Deterministic offline backend.

    Configured rules are tried first, in order, against the last user turn's
    text; without a match, built-in behavior answers descriptor requests with
    a canned one-sentence description (chosen by image hash) and policy
    requests with a valid decision payload keyed on the round text.  Never
    touches the network.
    """

    def __init__(self, config: BackendConfig):
        self.config = config

    def send(self, request: ChatRequest) -> ChatResponse:
        text = self._respond(request)
        # Synthetic backend: zero latency by definition, so downstream
        # latency fields stay reproducible.
        return ChatResponse(text=text, usage={"prompt_tokens": 0,
                                              "completion_tokens": 0}, latency_ms=0)

    def _respond(self, request: ChatRequest) -> str:
        last_user = request.last_user_text()
        for rule in self.config.rules:
            if "round" in rule and request.assistant_turns() != int(rule["round"]):
                continue
            if "if_contains" in rule and rule["if_contains"] not in last_user:
                continue
            return rule["reply"]

        first_user = request.messages[0].text_content() if request.messages else ""
        images = [p for m in request.messages for p in m.image_parts()]

        if "Return only one sentence." in first_user:
            seed = images[0].b64 if images else last_user
            return _SCRIPTED_DESCRIPTIONS[_stable_index(seed, len(_SCRIPTED_DESCRIPTIONS))]

        vlm = "image_description" in first_user
        if "looking toward the robot" in last_user:
            payload = dict(_SCRIPTED_ENGAGE)
        elif "looking away from the robot" in last_user:
            payload = dict(_SCRIPTED_WAIT)
        elif "No person" in last_user:
            payload = dict(_SCRIPTED_NOBODY)
        elif _stable_index(last_user + (images[-1].b64 if images else ""), 2) == 0:
            payload = dict(_SCRIPTED_SPEAK)
        else:
            payload = dict(_SCRIPTED_WAIT)
        if vlm:
            seed = images[-1].b64 if images else last_user
            payload["image_description"] = _SCRIPTED_DESCRIPTIONS[
                _stable_index("desc:" + seed, len(_SCRIPTED_DESCRIPTIONS))]
        return json.dumps(payload)


class HttpBackend:
    """OpenAI-compatible chat-completions client with retry/backoff."""

    def __init__(self, config: BackendConfig,
                 session: requests.Session | None = None,
                 sleep: Callable[[float], None] = time.sleep):
        self.config = config
        self._session = session or requests.Session()
        self._sleep = sleep
        self._limiter = _RateLimiter(config.rate_limit_rpm)

    def _auth_headers(self) -> dict:
        if not self.config.auth_env:
            return {}
        key = os.environ.get(self.config.auth_env)
        if not key:
            raise AuthError(
                f"backend '{self.config.backend_id}' needs credentials in "
                f"${self.config.auth_env}, which is unset")
        if self.config.auth_style == "api-key":
            return {"api-key": key}
        return {"Authorization": f"Bearer {key}"}

    @staticmethod
    def _wire_content(message: ChatMessage):
        if not message.image_parts():
            return message.text_content()
        parts = []
        for p in message.parts:
            if isinstance(p, TextPart):
                parts.append({"type": "text", "text": p.text})
            else:
                parts.append({"type": "image_url", "image_url": {
                    "url": f"data:{p.media_type};base64,{p.b64}"}})
        return parts

    def send(self, request: ChatRequest) -> ChatResponse:
        headers = self._auth_headers()  # fail fast on missing credentials
        payload = {
            "model": request.model_name,
            "messages": [{"role": m.role, "content": self._wire_content(m)}
                         for m in request.messages],
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
        }
        budget = self.config.retry_budget
        delay = self.config.backoff_base_s
        last_exc: Exception | None = None
        for attempt in range(budget + 1):
            if attempt > 0:
                self._sleep(delay)
                delay *= 2
            self._limiter.acquire(self._sleep)
            start = time.perf_counter()
            try:
                resp = self._session.post(self.config.endpoint, json=payload,
                                          headers=headers,
                                          timeout=self.config.timeout_s)
            except requests.RequestException as exc:
                last_exc = TransportError(f"transport failure: {exc}")
                continue
            latency_ms = int((time.perf_counter() - start) * 1000)
            if resp.status_code == 401 or resp.status_code == 403:
                raise AuthError(f"auth rejected by backend "
                                f"'{self.config.backend_id}' ({resp.status_code})")
            if resp.status_code == 429:
                last_exc = RateLimitError("rate limited by server (429)")
                continue
            if resp.status_code >= 500:
                last_exc = TransportError(f"server error {resp.status_code}")
                continue
            if resp.status_code != 200:
                raise GatewayError(f"unexpected status {resp.status_code}: "
                                   f"{resp.text[:200]}")
            data = resp.json()
            try:
                text = data["choices"][0]["message"]["content"]
            except (KeyError, IndexError, TypeError) as exc:
                raise GatewayError(f"malformed completion payload: {exc}")
            return ChatResponse(text=text or "", usage=data.get("usage", {}) or {},
                                latency_ms=latency_ms)
        assert last_exc is not None
        raise last_exc


def _make_backend(config: BackendConfig, sleep=time.sleep):
    if config.kind == "scripted":
        return ScriptedBackend(config)
    return HttpBackend(config, sleep=sleep)


class ResponseCache:
    """Fingerprint-keyed store of responses, one JSON file per fingerprint.

    Concurrent writers are safe: files are written to a temp name and
    atomically renamed, so identical fingerprints are last-write-wins and
    distinct fingerprints never interfere.
    """

    def __init__(self, root: str | Path):
        self.root = Path(root)

    def _path(self, fingerprint: str) -> Path:
        return self.root / f"{fingerprint}.json"

    def get(self, fingerprint: str) -> ChatResponse | None:
        p = self._path(fingerprint)
        if not p.is_file():
            return None
        d = json.loads(p.read_text(encoding="utf-8"))
        return ChatResponse(text=d["text"], usage=d.get("usage", {}),
                            latency_ms=int(d.get("latency_ms", 0)))

    def put(self, fingerprint: str, response: ChatResponse) -> None:
        self.root.mkdir(parents=True, exist_ok=True)
        record = {"fingerprint": fingerprint, "text": response.text,
                  "usage": response.usage, "latency_ms": response.latency_ms}
        fd, tmp = tempfile.mkstemp(dir=self.root, suffix=".tmp")
        try:
            with os.fdopen(fd, "w", encoding="utf-8") as fh:
                fh.write(json.dumps(record, ensure_ascii=False))
            os.replace(tmp, self._path(fingerprint))
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise

    def delete(self, fingerprint: str) -> bool:
        p = self._path(fingerprint)
        if p.is_file():
            p.unlink()
            return True
        return False

    def stats(self) -> dict:
        if not self.root.is_dir():
            return {"entries": 0, "bytes": 0}
        files = list(self.root.glob("*.json"))
        return {"entries": len(files), "bytes": sum(f.stat().st_size for f in files)}

    def purge(self) -> int:
        n = 0
        if self.root.is_dir():
            for f in self.root.glob("*.json"):
                f.unlink()
                n += 1
        return n


class Gateway:
    """Routes named backends and applies the record/replay cache policy.

    Modes: ``record`` calls live and stores every response; ``replay`` serves
    from cache and falls through to live on a miss; ``strict_replay`` errors
    on a miss; ``passthrough`` never touches the cache.
    """

    def __init__(self, backends: dict[str, BackendConfig],
                 cache: ResponseCache | None = None,
                 mode: str = "passthrough",
                 sleep: Callable[[float], None] = time.sleep):
        if mode not in CACHE_MODES:
            raise ValueError(f"mode must be one of {CACHE_MODES}")
        if mode != "passthrough" and cache is None:
            raise ValueError(f"cache required for mode '{mode}'")
        self.mode = mode
        self.cache = cache
        self._configs = dict(backends)
        self._backends = {name: _make_backend(cfg, sleep)
                          for name, cfg in backends.items()}

    def config(self, backend_id: str) -> BackendConfig:
        return self._configs[backend_id]

    def request(self, backend_id: str, messages: list[ChatMessage],
                temperature: float = 0.0, max_tokens: int = 1024) -> ChatRequest:
        cfg = self._configs[backend_id]
        return ChatRequest(backend_id=backend_id, model_name=cfg.model_name,
                           messages=tuple(messages), temperature=temperature,
                           max_tokens=max_tokens)

    def complete(self, request: ChatRequest) -> ChatResponse:
        backend = self._backends.get(request.backend_id)
        if backend is None:
            raise GatewayError(f"unknown backend '{request.backend_id}'")
        fp = request_fingerprint(request)

        if self.mode in ("replay", "strict_replay"):
            hit = self.cache.get(fp)
            if hit is not None:
                return hit
            if self.mode == "strict_replay":
                raise CacheMissError(fp)

        response = backend.send(request)
        if self.mode in ("record", "replay"):
            self.cache.put(fp, response)
        return response
