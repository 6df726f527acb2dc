"""Topic sampling and candidate-title generation."""

from __future__ import annotations

import logging
import os
import re
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, EmptyGeneration, NOutOfRange
from .gateway import PromptRequest
from .templates import TemplateSet

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Topic:
    area: str
    topic: str
    taxonomy_id: str = ""

    def __post_init__(self):
        if not self.area.strip() or not self.topic.strip():
            raise ConfigError("topic area and name must be non-empty")

    def __str__(self) -> str:
        return f"{self.area}: {self.topic}"

    def to_dict(self) -> dict:
        return {"taxonomy_id": self.taxonomy_id, "area": self.area, "topic": self.topic}

    @classmethod
    def from_dict(cls, d: dict) -> "Topic":
        return cls(area=d["area"], topic=d["topic"], taxonomy_id=d.get("taxonomy_id", ""))


@dataclass
class CandidateReference:
    title: str
    topic: Topic
    generator_model: str
    position_in_batch: int
    label: str | None = None
    scores: dict[str, float | None] = field(default_factory=dict)

    def __post_init__(self):
        self.title = self.title.strip()
        if not self.title:
            raise ConfigError("candidate title is empty")
        if self.position_in_batch < 1:
            raise ConfigError("position_in_batch starts at 1")
        if self.label not in (None, "G", "H"):
            raise ConfigError(f"label must be G, H or None, got {self.label!r}")
        for name, value in self.scores.items():
            if value is not None and not 0.0 <= value <= 1.0:
                raise ConfigError(f"score {name}={value} outside [0, 1]")

    def to_dict(self) -> dict:
        return {
            "title": self.title,
            "topic": self.topic.to_dict(),
            "generator_model": self.generator_model,
            "position_in_batch": self.position_in_batch,
            "label": self.label,
            "scores": dict(self.scores),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CandidateReference":
        return cls(
            title=d["title"],
            topic=Topic.from_dict(d["topic"]),
            generator_model=d["generator_model"],
            position_in_batch=int(d["position_in_batch"]),
            label=d.get("label"),
            scores=dict(d.get("scores") or {}),
        )


def load_taxonomy(path: str | os.PathLike) -> list[Topic]:
    """Read ``taxonomy_id<TAB>area<TAB>topic`` lines. Blank lines and ``#`` comments are skipped."""
    topics = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n").rstrip("\r")
            if not line.strip() or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise ConfigError(f"{path}:{lineno}: expected 3 tab-separated fields")
            topics.append(Topic(area=parts[1].strip(), topic=parts[2].strip(), taxonomy_id=parts[0].strip()))
    return topics


def sample_topics(taxonomy: list[Topic], n: int, seed: int | np.random.Generator) -> list[Topic]:
    """Uniform sample of ``n`` distinct topics, without replacement."""
    if n < 1 or n > len(taxonomy):
        raise NOutOfRange(f"n={n} outside [1, {len(taxonomy)}]")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    idx = rng.choice(len(taxonomy), size=n, replace=False)
    return [taxonomy[i] for i in idx]


_MARKER = re.compile(
    r"""^\s*(?:
        \(\d{1,3}\)          # (1)
      | \d{1,3}[.):]         # 1.  1)  1:
      | \d{1,3}\s+[-–]  # 1 -
      | [-*•‣–—]   # bullets
    )(?:\s+|$)(?P<body>.*)$""",
    re.VERBOSE,
)

_QUOTE_PAIRS = {'"': '"', "“": "”", "'": "'", "‘": "’", "*": "*", "_": "_"}


def _clean_title(text: str) -> str:
    text = re.sub(r"\*\*(.+?)\*\*", r"\1", text).strip()
    # a leading quoted span wins over trailing "by X et al."
    if text and text[0] in _QUOTE_PAIRS:
        close = _QUOTE_PAIRS[text[0]]
        end = text.find(close, 1)
        if end > 1:
            text = text[1:end]
    text = text.strip()
    while text.endswith("."):
        text = text[:-1].rstrip()
    return text


def parse_title_list(raw: str) -> list[str]:
    """Extract titles from a numbered or bulleted list answer.

    Lines without a list marker (preambles, sign-offs) are ignored. If no line
    carries a marker but there are several lines, each line not ending in a
    colon is taken as a title.
    """
    lines = [ln for ln in raw.splitlines() if ln.strip()]
    marked = [m.group("body") for ln in lines if (m := _MARKER.match(ln))]
    if not marked and len(lines) >= 2:
        marked = [ln for ln in lines if not ln.rstrip().endswith(":")]
    titles = []
    for body in marked:
        title = _clean_title(body)
        if title:
            titles.append(title)
    return titles


def generate_titles(
    topic: Topic,
    k: int,
    *,
    client,
    templates: TemplateSet,
    model_id: str,
    max_tokens: int = 256,
) -> list[CandidateReference]:
    """Ask the model under test for ``k`` titles on ``topic`` in one greedy completion."""
    if k < 1:
        raise ConfigError("k must be >= 1")
    prompt = templates.render("generate", area=topic.area, topic=topic.topic, k=k)
    batch = client.complete(
        PromptRequest(prompt_text=prompt, temperature=0.0, n_samples=1, max_tokens=max_tokens, model_id=model_id)
    )
    titles = parse_title_list(batch.completions[0])[:k]
    if not titles:
        raise EmptyGeneration(f"no titles parsed for topic {topic}")
    return [
        CandidateReference(title=t, topic=topic, generator_model=model_id, position_in_batch=i)
        for i, t in enumerate(titles, 1)
    ]
