"""Direct existence queries: ask the model yes/no and count the yeses."""

from __future__ import annotations

import math
import re
from dataclasses import dataclass

from .errors import ConfigError, MissingContext
from .gateway import PromptRequest
from .templates import TemplateSet

DQ_KINDS = ("DQ1", "DQ2", "DQ3")

_YES = re.compile(r"\byes\b", re.IGNORECASE)


@dataclass(frozen=True)
class DirectScore:
    title: str
    kind: str
    j: int
    yes_count: int
    score: float


def sampling_temperature(n: int) -> float:
    """Greedy decoding for a single sample, temperature 1 for several."""
    return 1.0 if n > 1 else 0.0


def format_context(context_titles: list[str], title: str) -> str:
    """Numbered comparison list; the probe title goes last."""
    items = [*context_titles, title]
    return "\n".join(f"{i}. {t}" for i, t in enumerate(items, 1))


def render_direct_prompt(
    kind: str, title: str, context_titles: list[str] | None = None, templates: TemplateSet | None = None
) -> str:
    if kind not in DQ_KINDS:
        raise ConfigError(f"unknown direct query kind {kind!r}")
    if not title:
        raise ConfigError("title must be non-empty")
    templates = templates or TemplateSet()
    if kind == "DQ3":
        if not context_titles:
            raise MissingContext("DQ3 needs at least one comparison title")
        return templates.render("dq3", title=title, context_titles=format_context(context_titles, title))
    return templates.render(kind.lower(), title=title)


def classify_completion(text: str) -> str:
    # literal whole-word presence: "no, but yes" counts as yes
    return "yes" if _YES.search(text or "") else "no"


def score_direct(
    kind: str,
    title: str,
    j: int,
    context_titles: list[str] | None = None,
    *,
    client,
    templates: TemplateSet | None = None,
    model_id: str = "default",
    max_tokens: int = 64,
) -> DirectScore:
    if j < 1:
        raise ConfigError("j must be >= 1")
    prompt = render_direct_prompt(kind, title, context_titles, templates)
    batch = client.complete(
        PromptRequest(
            prompt_text=prompt,
            temperature=sampling_temperature(j),
            n_samples=j,
            max_tokens=max_tokens,
            model_id=model_id,
        )
    )
    yes = sum(classify_completion(c) == "yes" for c in batch.completions)
    return DirectScore(title=title, kind=kind, j=j, yes_count=yes, score=yes / j)


def ensemble_dq(s1: float, s2: float, s3: float) -> float:
    # fsum is correctly rounded, so argument order cannot change the result;
    # the division can still push e.g. mean(0.1, 0.1, 0.1) one ulp past the inputs
    mean = math.fsum((s1, s2, s3)) / 3.0
    return min(max(mean, min(s1, s2, s3)), max(s1, s2, s3))
