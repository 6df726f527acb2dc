"""Provider-agnostic access to completion backends.

A :class:`Gateway` wraps one backend with a content-addressed disk cache,
bounded parallelism and retry/backoff for transport failures. Backends only
have to implement ``generate(request) -> RawCompletion``.
"""

from __future__ import annotations

import json
import logging
import os
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Literal, Protocol

from ._util import canonical_json, sha256_hex
from .errors import (
    BackendTimeout,
    BackendUnavailable,
    ConfigError,
    MalformedResponse,
    TransientBackendError,
)

logger = logging.getLogger(__name__)

CACHE_MAGIC = "RCK1"

Provenance = Literal["live", "cache", "replay"]


@dataclass(frozen=True)
class PromptRequest:
    prompt_text: str
    temperature: float = 0.0
    n_samples: int = 1
    max_tokens: int = 256
    model_id: str = "default"
    seed_hint: int | None = None

    def __post_init__(self):
        if not isinstance(self.prompt_text, str) or not self.prompt_text:
            raise ConfigError("prompt_text must be a non-empty string")
        temperature = float(self.temperature)
        if not 0.0 <= temperature <= 2.0:
            raise ConfigError(f"temperature must be in [0, 2], got {temperature}")
        object.__setattr__(self, "temperature", temperature)
        if int(self.n_samples) < 1:
            raise ConfigError(f"n_samples must be >= 1, got {self.n_samples}")
        if int(self.max_tokens) < 1:
            raise ConfigError(f"max_tokens must be >= 1, got {self.max_tokens}")
        # temperature 0 is greedy decoding: more than one sample would be redundant
        if temperature == 0.0:
            object.__setattr__(self, "n_samples", 1)
        else:
            object.__setattr__(self, "n_samples", int(self.n_samples))
        object.__setattr__(self, "max_tokens", int(self.max_tokens))

    def key_fields(self) -> dict:
        return {
            "model_id": self.model_id,
            "prompt_text": self.prompt_text,
            "temperature": self.temperature,
            "n_samples": self.n_samples,
            "max_tokens": self.max_tokens,
        }

    def to_dict(self) -> dict:
        return {**self.key_fields(), "seed_hint": self.seed_hint}

    @classmethod
    def from_dict(cls, d: dict) -> "PromptRequest":
        return cls(
            prompt_text=d["prompt_text"],
            temperature=d["temperature"],
            n_samples=d["n_samples"],
            max_tokens=d["max_tokens"],
            model_id=d["model_id"],
            seed_hint=d.get("seed_hint"),
        )


def cache_key(request: PromptRequest) -> str:
    """Byte-exact digest of the fields that determine a completion.

    No whitespace or case normalization is applied to the prompt.
    """
    return sha256_hex(canonical_json(request.key_fields()))


@dataclass(frozen=True)
class CompletionBatch:
    request_digest: str
    completions: tuple[str, ...]
    prompt_tokens: int = 0
    completion_tokens: int = 0
    provenance: Provenance = "live"

    def to_dict(self) -> dict:
        return {
            "request_digest": self.request_digest,
            "completions": list(self.completions),
            "prompt_tokens": self.prompt_tokens,
            "completion_tokens": self.completion_tokens,
            "provenance": self.provenance,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CompletionBatch":
        return cls(
            request_digest=d["request_digest"],
            completions=tuple(d["completions"]),
            prompt_tokens=int(d["prompt_tokens"]),
            completion_tokens=int(d["completion_tokens"]),
            provenance=d["provenance"],
        )


@dataclass(frozen=True)
class RawCompletion:
    """What a backend hands back before the gateway stamps digest and provenance."""

    completions: list[str]
    prompt_tokens: int = 0
    completion_tokens: int = 0


class Backend(Protocol):
    provenance: Provenance

    def generate(self, request: PromptRequest) -> RawCompletion: ...


@dataclass(frozen=True)
class BackendPolicy:
    max_in_flight: int = 4
    max_retries: int = 3
    backoff_base_ms: int = 500
    timeout_ms: int = 60_000

    def __post_init__(self):
        if self.max_in_flight < 1:
            raise ConfigError("max_in_flight must be >= 1")
        if self.max_retries < 0:
            raise ConfigError("max_retries must be >= 0")
        if self.backoff_base_ms < 0:
            raise ConfigError("backoff_base_ms must be >= 0")
        if self.timeout_ms < 1:
            raise ConfigError("timeout_ms must be >= 1")


class CompletionCache:
    """Directory of digest-named records, one file per request.

    Each file starts with the ``RCK1`` header line followed by a JSON body
    holding the request and the batch. Unreadable records count as misses.
    """

    def __init__(self, root: str | os.PathLike):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self._locks: dict[str, threading.Lock] = {}
        self._guard = threading.Lock()

    def path_for(self, digest: str) -> Path:
        return self.root / f"{digest}.rck"

    def lock_for(self, digest: str) -> threading.Lock:
        with self._guard:
            return self._locks.setdefault(digest, threading.Lock())

    def get(self, digest: str) -> CompletionBatch | None:
        path = self.path_for(digest)
        try:
            text = path.read_text(encoding="utf-8")
        except FileNotFoundError:
            return None
        except OSError:
            return None
        header, _, body = text.partition("\n")
        if header != CACHE_MAGIC:
            logger.warning("cache record %s has bad header, treating as miss", path.name)
            return None
        try:
            record = json.loads(body)
            batch = CompletionBatch.from_dict(record["batch"])
        except (ValueError, KeyError, TypeError):
            logger.warning("cache record %s is corrupt, treating as miss", path.name)
            return None
        if batch.request_digest != digest:
            return None
        return batch

    def put(self, request: PromptRequest, batch: CompletionBatch) -> None:
        body = json.dumps(
            {"version": 1, "request": request.to_dict(), "batch": batch.to_dict()},
            ensure_ascii=False,
            sort_keys=True,
        )
        path = self.path_for(batch.request_digest)
        tmp = path.with_name(f".{path.name}.{os.getpid()}.{threading.get_ident()}.tmp")
        tmp.write_text(f"{CACHE_MAGIC}\n{body}\n", encoding="utf-8")
        os.replace(tmp, path)


@dataclass
class GatewayStats:
    live_calls: int = 0
    backend_calls: int = 0
    cache_hits: int = 0
    retries: int = 0
    max_concurrent: int = 0


class Gateway:
    """Cached, rate-limited front door to a completion backend.

    Safe to share between threads. ``policy.max_in_flight`` bounds how many
    backend calls run at the same time; cache hits never take a slot.
    """

    def __init__(
        self,
        backend: Backend,
        cache: CompletionCache | None = None,
        policy: BackendPolicy | None = None,
        sleep: Callable[[float], None] = time.sleep,
    ):
        self.backend = backend
        self.cache = cache
        self.policy = policy or BackendPolicy()
        self._sleep = sleep
        self._slots = threading.BoundedSemaphore(self.policy.max_in_flight)
        self._stats_lock = threading.Lock()
        self._in_flight = 0
        self.stats = GatewayStats()

    def complete(self, request: PromptRequest) -> CompletionBatch:
        digest = cache_key(request)
        if self.cache is None:
            return self._call_backend(request, digest)
        with self.cache.lock_for(digest):
            cached = self.cache.get(digest)
            if cached is not None:
                with self._stats_lock:
                    self.stats.cache_hits += 1
                return CompletionBatch(
                    request_digest=cached.request_digest,
                    completions=cached.completions,
                    prompt_tokens=cached.prompt_tokens,
                    completion_tokens=cached.completion_tokens,
                    provenance="cache",
                )
            batch = self._call_backend(request, digest)
            self.cache.put(request, batch)
            return batch

    def _call_backend(self, request: PromptRequest, digest: str) -> CompletionBatch:
        attempts = self.policy.max_retries + 1
        last_error: Exception | None = None
        for attempt in range(attempts):
            if attempt:
                with self._stats_lock:
                    self.stats.retries += 1
                self._sleep(self.policy.backoff_base_ms * (2 ** (attempt - 1)) / 1000.0)
            try:
                raw = self._guarded_generate(request)
            except (TransientBackendError, BackendTimeout) as exc:
                last_error = exc
                logger.info("attempt %d for %s failed: %s", attempt + 1, digest[:12], exc)
                continue
            except MalformedResponse as exc:
                exc.request_digest = digest
                raise
            return self._stamp(request, digest, raw)
        if isinstance(last_error, BackendTimeout):
            raise BackendTimeout(str(last_error), digest) from last_error
        raise BackendUnavailable(
            f"backend failed {attempts} time(s) for request {digest[:12]}: {last_error}", digest
        ) from last_error

    def _guarded_generate(self, request: PromptRequest) -> RawCompletion:
        with self._slots:
            with self._stats_lock:
                self._in_flight += 1
                self.stats.backend_calls += 1
                if self.backend.provenance == "live":
                    self.stats.live_calls += 1
                self.stats.max_concurrent = max(self.stats.max_concurrent, self._in_flight)
            try:
                return self.backend.generate(request)
            finally:
                with self._stats_lock:
                    self._in_flight -= 1

    def _stamp(self, request: PromptRequest, digest: str, raw: RawCompletion) -> CompletionBatch:
        completions = raw.completions
        if not isinstance(completions, (list, tuple)) or not all(
            isinstance(c, str) for c in completions
        ):
            raise MalformedResponse("completions must be a list of strings", digest)
        if len(completions) != request.n_samples:
            raise MalformedResponse(
                f"expected {request.n_samples} completions, got {len(completions)}", digest
            )
        if raw.prompt_tokens < 0 or raw.completion_tokens < 0:
            raise MalformedResponse("negative token counts", digest)
        return CompletionBatch(
            request_digest=digest,
            completions=tuple(completions),
            prompt_tokens=int(raw.prompt_tokens),
            completion_tokens=int(raw.completion_tokens),
            provenance=self.backend.provenance,
        )


@dataclass
class UsageMeter:
    """Sums token usage over the batches one stage of a run consumed."""

    gateway: Gateway
    prompt_tokens: int = 0
    completion_tokens: int = 0
    batches: int = 0
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def complete(self, request: PromptRequest) -> CompletionBatch:
        batch = self.gateway.complete(request)
        with self._lock:
            self.prompt_tokens += batch.prompt_tokens
            self.completion_tokens += batch.completion_tokens
            self.batches += 1
        return batch

    def totals(self) -> dict:
        return {
            "batches": self.batches,
            "prompt_tokens": self.prompt_tokens,
            "completion_tokens": self.completion_tokens,
        }
