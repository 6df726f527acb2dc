"""Ground-truth labels from quoted exact-phrase web search.

A title is hallucinated (H) when its quoted search returns nothing and
grounded (G) otherwise. Only the zero/nonzero answer and a timestamp are
kept; result pages are never stored.
"""

from __future__ import annotations

import json
import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from datetime import datetime, timezone
from typing import Callable, Protocol

from .errors import ConfigError, SearchBackendUnavailable

logger = logging.getLogger(__name__)

FIXED_EPOCH = "1970-01-01T00:00:00Z"


def utc_now() -> str:
    return datetime.now(timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


class SearchBackend(Protocol):
    def result_count(self, query: str) -> int: ...

    def now(self) -> str: ...


@dataclass(frozen=True)
class SearchResultSummary:
    query: str
    result_count_is_zero: bool
    retrieved_at: str

    def to_dict(self) -> dict:
        return {
            "query": self.query,
            "result_count_is_zero": self.result_count_is_zero,
            "retrieved_at": self.retrieved_at,
        }


@dataclass(frozen=True)
class LabelRecord:
    title: str
    label: str | None
    search: SearchResultSummary | None
    flagged: bool = False

    def to_dict(self) -> dict:
        return {
            "title": self.title,
            "label": self.label,
            "search": self.search.to_dict() if self.search else None,
            "flagged": self.flagged,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LabelRecord":
        s = d.get("search")
        return cls(
            title=d["title"],
            label=d.get("label"),
            search=SearchResultSummary(**s) if s else None,
            flagged=bool(d.get("flagged", False)),
        )


def build_quoted_query(title: str) -> str:
    if not title:
        raise ConfigError("title must be non-empty")
    return '"' + title.replace('"', "'") + '"'


class FixtureSearchBackend:
    """Offline backend reading ``{"query": ..., "count": ...}`` JSON-lines.

    Unknown queries count as zero results. Timestamps are a fixed epoch so
    that fixture runs are byte-reproducible.
    """

    def __init__(self, counts: dict[str, int], default_count: int = 0):
        self.counts = dict(counts)
        self.default_count = default_count
        self.calls = 0

    @classmethod
    def from_file(cls, path: str | os.PathLike) -> "FixtureSearchBackend":
        counts = {}
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                if not line.strip():
                    continue
                try:
                    row = json.loads(line)
                    count = int(row["count"])
                except (ValueError, KeyError, TypeError) as exc:
                    raise ConfigError(f"{path}:{lineno}: bad search fixture ({exc})") from exc
                if count < 0:
                    raise ConfigError(f"{path}:{lineno}: negative count")
                counts[row["query"]] = count
        return cls(counts)

    def result_count(self, query: str) -> int:
        self.calls += 1
        return self.counts.get(query, self.default_count)

    def now(self) -> str:
        return FIXED_EPOCH


class BingSearchBackend:
    """Adapter for a Bing-Web-Search-shaped HTTP API.

    Reads the subscription key from the environment variable named by
    ``api_key_env`` (default ``REFCHECK_SEARCH_KEY``).
    """

    def __init__(
        self,
        endpoint: str = "https://api.bing.microsoft.com/v7.0/search",
        api_key_env: str = "REFCHECK_SEARCH_KEY",
        params: dict | None = None,
        timeout_ms: int = 30_000,
        client=None,
    ):
        import httpx

        self.endpoint = endpoint
        self.api_key_env = api_key_env
        self.params = dict(params or {})
        self._client = client or httpx.Client(timeout=timeout_ms / 1000.0)

    def result_count(self, query: str) -> int:
        import httpx

        key = os.environ.get(self.api_key_env)
        if not key:
            raise ConfigError(f"environment variable {self.api_key_env} is not set")
        try:
            resp = self._client.get(
                self.endpoint,
                params={**self.params, "q": query},
                headers={"Ocp-Apim-Subscription-Key": key},
            )
            resp.raise_for_status()
            body = resp.json()
        except (httpx.HTTPError, ValueError) as exc:
            raise SearchBackendUnavailable(f"search failed: {exc}") from exc
        pages = body.get("webPages") or {}
        return len(pages.get("value") or [])

    def now(self) -> str:
        return utc_now()


def label_reference(
    title: str,
    backend: SearchBackend,
    *,
    max_retries: int = 2,
    backoff_s: float = 0.5,
    sleep: Callable[[float], None] = time.sleep,
) -> LabelRecord:
    """Label one title. A backend outage after retries yields a flagged, unlabeled record."""
    query = build_quoted_query(title)
    for attempt in range(max_retries + 1):
        if attempt:
            sleep(backoff_s * 2 ** (attempt - 1))
        try:
            count = backend.result_count(query)
        except SearchBackendUnavailable as exc:
            logger.info("search attempt %d for %r failed: %s", attempt + 1, query, exc)
            continue
        zero = count == 0
        summary = SearchResultSummary(query=query, result_count_is_zero=zero, retrieved_at=backend.now())
        return LabelRecord(title=title, label="H" if zero else "G", search=summary)
    logger.warning("search unavailable for %r; leaving unlabeled", query)
    return LabelRecord(title=title, label=None, search=None, flagged=True)


def label_titles(
    titles: list[str],
    backend: SearchBackend,
    *,
    max_workers: int = 4,
    max_retries: int = 2,
    backoff_s: float = 0.5,
    sleep: Callable[[float], None] = time.sleep,
) -> list[LabelRecord]:
    """Label many titles concurrently, querying each distinct quoted string once."""
    by_query: dict[str, str] = {}
    for t in titles:
        by_query.setdefault(build_quoted_query(t), t)
    unique = list(by_query.values())
    with ThreadPoolExecutor(max_workers=max_workers) as pool:
        results = list(
            pool.map(
                lambda t: label_reference(t, backend, max_retries=max_retries, backoff_s=backoff_s, sleep=sleep),
                unique,
            )
        )
    per_query = {build_quoted_query(r.title): r for r in results}
    out = []
    for t in titles:
        rec = per_query[build_quoted_query(t)]
        out.append(LabelRecord(title=t, label=rec.label, search=rec.search, flagged=rec.flagged))
    return out
