"""Completion backends: replay fixtures, recorder, callables and a live HTTP adapter."""

from __future__ import annotations

import json
import logging
import os
import threading
from pathlib import Path
from typing import Callable

from .errors import (
    BackendTimeout,
    ConfigError,
    MalformedResponse,
    ReplayMiss,
    TransientBackendError,
)
from .gateway import PromptRequest, RawCompletion, cache_key

logger = logging.getLogger(__name__)

DEFAULT_API_KEY_ENV = "REFCHECK_API_KEY"
DEFAULT_API_BASE_ENV = "REFCHECK_API_BASE"


class ReplayBackend:
    """Serves recorded completions keyed by request digest. Never touches the network.

    Fixture format is JSON-lines::

        {"digest": "<hex>", "completions": [...], "prompt_tokens": 0, "completion_tokens": 0}
    """

    provenance = "replay"

    def __init__(self, records: dict[str, RawCompletion] | None = None):
        self.records: dict[str, RawCompletion] = dict(records or {})

    @classmethod
    def from_file(cls, path: str | os.PathLike) -> "ReplayBackend":
        records = {}
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                if not line.strip():
                    continue
                try:
                    row = json.loads(line)
                    records[row["digest"]] = RawCompletion(
                        completions=list(row["completions"]),
                        prompt_tokens=int(row.get("prompt_tokens", 0)),
                        completion_tokens=int(row.get("completion_tokens", 0)),
                    )
                except (ValueError, KeyError, TypeError) as exc:
                    raise ConfigError(f"{path}:{lineno}: bad replay record ({exc})") from exc
        return cls(records)

    def generate(self, request: PromptRequest) -> RawCompletion:
        digest = cache_key(request)
        try:
            return self.records[digest]
        except KeyError:
            raise ReplayMiss(f"no replay record for request {digest[:12]}", digest) from None


class CallableBackend:
    """Adapts ``fn(request) -> list[str] | RawCompletion`` into a backend.

    Used for scripted fakes in tests and fixture generation.
    """

    def __init__(self, fn: Callable[[PromptRequest], object], provenance: str = "live"):
        self.fn = fn
        self.provenance = provenance

    def generate(self, request: PromptRequest) -> RawCompletion:
        out = self.fn(request)
        if isinstance(out, RawCompletion):
            return out
        completions = list(out)
        return RawCompletion(
            completions=completions,
            prompt_tokens=len(request.prompt_text.split()),
            completion_tokens=sum(len(c.split()) for c in completions),
        )


class RecordingBackend:
    """Pass-through that remembers every answer so it can be saved as a replay fixture."""

    def __init__(self, inner):
        self.inner = inner
        self.provenance = inner.provenance
        self.recorded: dict[str, RawCompletion] = {}
        self._lock = threading.Lock()

    def generate(self, request: PromptRequest) -> RawCompletion:
        raw = self.inner.generate(request)
        with self._lock:
            self.recorded[cache_key(request)] = raw
        return raw

    def save(self, path: str | os.PathLike) -> None:
        lines = []
        for digest in sorted(self.recorded):
            raw = self.recorded[digest]
            lines.append(
                json.dumps(
                    {
                        "digest": digest,
                        "completions": list(raw.completions),
                        "prompt_tokens": raw.prompt_tokens,
                        "completion_tokens": raw.completion_tokens,
                    },
                    ensure_ascii=False,
                )
            )
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


class OpenAIChatBackend:
    """Live adapter for any OpenAI-compatible ``/chat/completions`` endpoint.

    The API key is read from the environment variable named by ``api_key_env``
    (default ``REFCHECK_API_KEY``); the base URL from ``base_url`` or
    ``REFCHECK_API_BASE``. The key is never logged.
    """

    provenance = "live"

    def __init__(
        self,
        base_url: str | None = None,
        api_key_env: str = DEFAULT_API_KEY_ENV,
        timeout_ms: int = 60_000,
        client=None,
    ):
        import httpx

        self.base_url = (base_url or os.environ.get(DEFAULT_API_BASE_ENV) or "").rstrip("/")
        if not self.base_url:
            raise ConfigError(f"no API base URL configured (set {DEFAULT_API_BASE_ENV})")
        self._api_key_env = api_key_env
        self._client = client or httpx.Client(timeout=timeout_ms / 1000.0)

    def _headers(self) -> dict:
        key = os.environ.get(self._api_key_env)
        if not key:
            raise ConfigError(f"environment variable {self._api_key_env} is not set")
        return {"Authorization": f"Bearer {key}", "Content-Type": "application/json"}

    def generate(self, request: PromptRequest) -> RawCompletion:
        import httpx

        payload = {
            "model": request.model_id,
            "messages": [{"role": "user", "content": request.prompt_text}],
            "temperature": request.temperature,
            "n": request.n_samples,
            "max_tokens": request.max_tokens,
        }
        if request.seed_hint is not None:
            payload["seed"] = request.seed_hint
        try:
            resp = self._client.post(
                f"{self.base_url}/chat/completions", json=payload, headers=self._headers()
            )
        except httpx.TimeoutException as exc:
            raise BackendTimeout(f"request timed out: {exc}") from exc
        except httpx.TransportError as exc:
            raise TransientBackendError(f"transport error: {exc}") from exc
        if resp.status_code == 429 or resp.status_code >= 500:
            raise TransientBackendError(f"HTTP {resp.status_code}")
        if resp.status_code >= 400:
            raise MalformedResponse(f"HTTP {resp.status_code}: {resp.text[:200]}")
        try:
            body = resp.json()
            choices = sorted(body["choices"], key=lambda c: c.get("index", 0))
            completions = [(c.get("message") or {}).get("content") or "" for c in choices]
            usage = body.get("usage") or {}
        except (ValueError, KeyError, TypeError, AttributeError) as exc:
            raise MalformedResponse(f"undecodable completion payload: {exc}") from exc
        return RawCompletion(
            completions=completions,
            prompt_tokens=int(usage.get("prompt_tokens", 0)),
            completion_tokens=int(usage.get("completion_tokens", 0)),
        )
