"""Indirect queries: ask for a title's authors several times and measure agreement.

Agreement between two answers is judged per unordered pair, either by the
model itself (:class:`LMOverlapJudge`) or by name matching
(:class:`StringOverlapJudge`).
"""

from __future__ import annotations

import logging
import re
import unicodedata
from dataclasses import dataclass
from itertools import combinations
from typing import Protocol

from .direct import sampling_temperature
from .errors import ConfigError, JudgeUnparseable
from .gateway import PromptRequest
from .templates import TemplateSet

logger = logging.getLogger(__name__)

MAX_AUTHOR_ANSWER_CHARS = 400

DEFAULT_REFUSAL_PREFIXES = (
    "i could not",
    "i couldn't",
    "i cannot",
    "i can't",
    "i am unable",
    "i'm unable",
    "i was unable",
    "i am not able",
    "i'm not able",
    "i am sorry",
    "i'm sorry",
    "sorry",
    "i apologize",
    "unfortunately",
    "as an ai",
    "i do not have",
    "i don't have",
    "i am not aware",
    "i'm not aware",
    "i am not familiar",
    "i'm not familiar",
    "there is no",
    "there are no",
    "no information",
    "unknown",
    "n/a",
)

RETRY_SUFFIX = "\nAnswer with only one number between 0 and 1."


@dataclass(frozen=True)
class AuthorResponse:
    title: str
    session_index: int
    raw_text: str
    looks_like_author_list: bool


@dataclass(frozen=True)
class OverlapJudgment:
    pair: tuple[int, int]
    overlap: float
    judge_raw: str


@dataclass(frozen=True)
class IndirectScore:
    title: str
    i: int
    judgments: tuple[OverlapJudgment, ...]
    score: float


def looks_like_author_list(text: str, refusal_prefixes=DEFAULT_REFUSAL_PREFIXES) -> bool:
    stripped = (text or "").strip()
    if not stripped or len(stripped) > MAX_AUTHOR_ANSWER_CHARS:
        return False
    lowered = stripped.lower().lstrip("\"'*- ")
    return not any(lowered.startswith(p) for p in refusal_prefixes)


def interrogate(
    title: str,
    i: int,
    *,
    client,
    templates: TemplateSet | None = None,
    model_id: str = "default",
    max_tokens: int = 256,
    refusal_prefixes=DEFAULT_REFUSAL_PREFIXES,
) -> list[AuthorResponse]:
    if i < 2:
        raise ConfigError("i must be >= 2")
    templates = templates or TemplateSet()
    batch = client.complete(
        PromptRequest(
            prompt_text=templates.render("iq_authors", title=title),
            temperature=sampling_temperature(i),
            n_samples=i,
            max_tokens=max_tokens,
            model_id=model_id,
        )
    )
    return [
        AuthorResponse(
            title=title,
            session_index=k,
            raw_text=text,
            looks_like_author_list=looks_like_author_list(text, refusal_prefixes),
        )
        for k, text in enumerate(batch.completions, 1)
    ]


_NUMBER = re.compile(r"(?<![\d.])(\d+(?:\.\d+)?|\.\d+)\s*(%)?")


def parse_fraction(text: str) -> float:
    """First number in ``text`` that lies in [0, 1]; percentages are scaled."""
    for m in _NUMBER.finditer(text or ""):
        value = float(m.group(1))
        if m.group(2):
            value /= 100.0
        if 0.0 <= value <= 1.0:
            return value
    raise JudgeUnparseable(f"no fraction in judge answer {text[:80]!r}")


class OverlapJudge(Protocol):
    def judge(self, title: str, first: str, second: str) -> tuple[float, str]: ...


class LMOverlapJudge:
    """Asks a model for the fraction of shared authors, greedy decoding, one retry."""

    def __init__(self, client, templates: TemplateSet | None = None, model_id: str = "default", max_tokens: int = 32):
        self.client = client
        self.templates = templates or TemplateSet()
        self.model_id = model_id
        self.max_tokens = max_tokens

    def _ask(self, prompt: str) -> str:
        batch = self.client.complete(
            PromptRequest(prompt_text=prompt, temperature=0.0, n_samples=1, max_tokens=self.max_tokens, model_id=self.model_id)
        )
        return batch.completions[0]

    def judge(self, title: str, first: str, second: str) -> tuple[float, str]:
        prompt = self.templates.render("iq_overlap", title=title, authors_a=first, authors_b=second)
        raw = self._ask(prompt)
        try:
            return parse_fraction(raw), raw
        except JudgeUnparseable:
            pass
        # greedy decoding would repeat itself, so the retry prompt differs
        raw = self._ask(prompt + RETRY_SUFFIX)
        try:
            return parse_fraction(raw), raw
        except JudgeUnparseable:
            logger.info("judge unparseable twice for %r; overlap set to 0", title)
            return 0.0, raw


_SPLIT = re.compile(r";|\n|,|&|\band\b|\bwith\b", re.IGNORECASE)
_LEADIN = re.compile(r"^\s*(?:the\s+)?(?:authors?\s*(?:are|is|:)|written\s+by|by)\s*:?\s*", re.IGNORECASE)
_ETAL = re.compile(r"\bet\s+al\.?", re.IGNORECASE)


def _fold(text: str) -> str:
    decomposed = unicodedata.normalize("NFKD", text)
    return "".join(c for c in decomposed if not unicodedata.combining(c)).lower()


def author_keys(text: str) -> list[frozenset[str]]:
    """One token set per author; initials are dropped."""
    text = _ETAL.sub(" ", _LEADIN.sub("", text or ""))
    keys = []
    for chunk in _SPLIT.split(text):
        tokens = frozenset(t for t in re.findall(r"[a-z][a-z'\-]+", _fold(chunk)) if len(t) > 1)
        if tokens and tokens not in keys:
            keys.append(tokens)
    return keys


def _same_person(a: frozenset[str], b: frozenset[str]) -> bool:
    shared = a & b
    if not shared:
        return False
    if a <= b or b <= a or len(shared) >= 2:
        return True
    # short given names: "Dan Jurafsky" vs "Daniel Jurafsky"
    return any(x.startswith(y) or y.startswith(x) for x in a - shared for y in b - shared)


class StringOverlapJudge:
    """Deterministic name matcher: Jaccard over matched authors.

    Two authors match when one's name tokens contain the other's
    ("B. Jones" vs "Bob Jones"), they share two or more tokens, or they share
    one token and the remaining given names are prefixes of each other.
    """

    def judge(self, title: str, first: str, second: str) -> tuple[float, str]:
        a, b = author_keys(first), author_keys(second)
        if not a or not b:
            return 0.0, "string-judge: empty author list"
        unused = list(b)
        matched = 0
        for key in a:
            for cand in unused:
                if _same_person(key, cand):
                    unused.remove(cand)
                    matched += 1
                    break
        overlap = matched / (len(a) + len(b) - matched)
        return overlap, f"string-judge: {matched} matched of {len(a)}+{len(b)}"


def estimate_overlap(a: AuthorResponse, b: AuthorResponse, judge: OverlapJudge) -> OverlapJudgment:
    pair = (min(a.session_index, b.session_index), max(a.session_index, b.session_index))
    if not (a.looks_like_author_list and b.looks_like_author_list):
        return OverlapJudgment(pair=pair, overlap=0.0, judge_raw="")
    if a.raw_text == b.raw_text:
        return OverlapJudgment(pair=pair, overlap=1.0, judge_raw="")
    # sorted texts make the judge call (and its cache key) order-free
    first, second = sorted((a.raw_text, b.raw_text))
    overlap, raw = judge.judge(a.title, first, second)
    return OverlapJudgment(pair=pair, overlap=min(max(overlap, 0.0), 1.0), judge_raw=raw)


def score_indirect(
    title: str,
    i: int,
    *,
    client,
    judge: OverlapJudge,
    templates: TemplateSet | None = None,
    model_id: str = "default",
    max_tokens: int = 256,
    refusal_prefixes=DEFAULT_REFUSAL_PREFIXES,
) -> IndirectScore:
    responses = interrogate(
        title, i, client=client, templates=templates, model_id=model_id,
        max_tokens=max_tokens, refusal_prefixes=refusal_prefixes,
    )
    judgments = tuple(estimate_overlap(a, b, judge) for a, b in combinations(responses, 2))
    score = sum(j.overlap for j in judgments) / len(judgments)
    lo = min(j.overlap for j in judgments)
    hi = max(j.overlap for j in judgments)
    return IndirectScore(title=title, i=i, judgments=judgments, score=min(max(score, lo), hi))


def ensemble_iq_dq(iq: float, dq: float) -> float:
    mean = (iq + dq) / 2.0
    return min(max(mean, min(iq, dq)), max(iq, dq))
