"""Run configuration: YAML schema, validation and digesting.

Example (all keys except ``model_id``, ``taxonomy_path`` and ``output_dir``
are optional)::

    version: 1
    model_id: gpt-4
    judge_model_id: null        # defaults to model_id
    taxonomy_path: ccs_topics.tsv
    output_dir: runs/gpt-4
    seed: 0
    n_topics: 200
    titles_per_topic: 5
    j_direct: 10
    i_indirect: 3
    dq3_context_size: 4
    overlap_judge: lm           # lm | string
    bootstrap_replicates: 100
    fdr_draws: 20
    template_dir: null
    max_tokens: {generate: 256, direct: 64, indirect: 256, judge: 32}
    llm:
      backend: openai           # openai | replay
      base_url: https://api.openai.com/v1
      api_key_env: REFCHECK_API_KEY
      replay_path: null
      policy: {max_in_flight: 4, max_retries: 3, backoff_base_ms: 500, timeout_ms: 60000}
    search:
      backend: bing             # bing | fixture
      fixture_path: null
      endpoint: https://api.bing.microsoft.com/v7.0/search
      api_key_env: REFCHECK_SEARCH_KEY
      params: {}
      max_in_flight: 4
      max_retries: 2
    annotations: {}             # rater name -> JSON-lines of {"title", "label"}

Relative paths are resolved against the config file's directory.
"""

from __future__ import annotations

import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import yaml

from ._util import canonical_json, file_digest, sha256_hex
from .errors import ConfigError
from .gateway import BackendPolicy

CONFIG_VERSION = 1


@dataclass
class MaxTokens:
    generate: int = 256
    direct: int = 64
    indirect: int = 256
    judge: int = 32


@dataclass
class LLMConfig:
    backend: str = "openai"
    base_url: str | None = None
    api_key_env: str = "REFCHECK_API_KEY"
    replay_path: str | None = None
    policy: BackendPolicy = field(default_factory=BackendPolicy)


@dataclass
class SearchConfig:
    backend: str = "bing"
    fixture_path: str | None = None
    endpoint: str = "https://api.bing.microsoft.com/v7.0/search"
    api_key_env: str = "REFCHECK_SEARCH_KEY"
    params: dict = field(default_factory=dict)
    max_in_flight: int = 4
    max_retries: int = 2


@dataclass
class RunConfig:
    model_id: str
    taxonomy_path: str
    output_dir: str | None = None
    version: int = CONFIG_VERSION
    judge_model_id: str | None = None
    seed: int = 0
    n_topics: int = 200
    titles_per_topic: int = 5
    j_direct: int = 10
    i_indirect: int = 3
    dq3_context_size: int = 4
    overlap_judge: str = "lm"
    bootstrap_replicates: int = 100
    fdr_draws: int = 20
    template_dir: str | None = None
    max_tokens: MaxTokens = field(default_factory=MaxTokens)
    llm: LLMConfig = field(default_factory=LLMConfig)
    search: SearchConfig = field(default_factory=SearchConfig)
    annotations: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        self.validate()

    @property
    def judge_model(self) -> str:
        return self.judge_model_id or self.model_id

    def validate(self) -> None:
        if self.version != CONFIG_VERSION:
            raise ConfigError(f"unsupported config version {self.version}")
        if not self.model_id:
            raise ConfigError("model_id is required")
        for name in ("n_topics", "titles_per_topic", "j_direct", "dq3_context_size", "fdr_draws"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.i_indirect < 2:
            raise ConfigError(f"i_indirect must be >= 2, got {self.i_indirect}")
        if self.bootstrap_replicates < 2:
            raise ConfigError("bootstrap_replicates must be >= 2")
        if self.overlap_judge not in ("lm", "string"):
            raise ConfigError("overlap_judge must be 'lm' or 'string'")
        if self.llm.backend not in ("openai", "replay"):
            raise ConfigError(f"unknown llm backend {self.llm.backend!r}")
        if self.llm.backend == "replay" and not self.llm.replay_path:
            raise ConfigError("llm.replay_path is required for the replay backend")
        if self.search.backend not in ("bing", "fixture"):
            raise ConfigError(f"unknown search backend {self.search.backend!r}")
        if self.search.backend == "fixture" and not self.search.fixture_path:
            raise ConfigError("search.fixture_path is required for the fixture backend")
        if self.search.max_in_flight < 1 or self.search.max_retries < 0:
            raise ConfigError("search.max_in_flight must be >= 1 and max_retries >= 0")
        for name in ("generate", "direct", "indirect", "judge"):
            if getattr(self.max_tokens, name) < 1:
                raise ConfigError(f"max_tokens.{name} must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, raw: dict, base_dir: str | os.PathLike | None = None) -> "RunConfig":
        if not isinstance(raw, dict):
            raise ConfigError("config must be a mapping")
        raw = dict(raw)
        try:
            llm_raw = dict(raw.pop("llm", None) or {})
            policy = _build(BackendPolicy, llm_raw.pop("policy", None) or {}, "llm.policy")
            llm = _build(LLMConfig, {**llm_raw, "policy": policy}, "llm")
            search = _build(SearchConfig, raw.pop("search", None) or {}, "search")
            max_tokens = _build(MaxTokens, raw.pop("max_tokens", None) or {}, "max_tokens")
            cfg = _build(cls, {**raw, "llm": llm, "search": search, "max_tokens": max_tokens}, "config")
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
        if base_dir is not None:
            cfg.resolve_paths(Path(base_dir))
        return cfg

    def resolve_paths(self, base: Path) -> None:
        def fix(p):
            return None if p is None else str((base / p).resolve()) if not os.path.isabs(p) else p

        self.taxonomy_path = fix(self.taxonomy_path)
        self.output_dir = fix(self.output_dir)
        self.template_dir = fix(self.template_dir)
        self.llm.replay_path = fix(self.llm.replay_path)
        self.search.fixture_path = fix(self.search.fixture_path)
        self.annotations = {k: fix(v) for k, v in self.annotations.items()}

    def digest(self) -> str:
        """Content digest: input files count by content, the output location not at all."""
        d = self.to_dict()
        d.pop("output_dir")
        d["taxonomy_path"] = _content(self.taxonomy_path)
        d["llm"]["replay_path"] = _content(self.llm.replay_path)
        d["search"]["fixture_path"] = _content(self.search.fixture_path)
        d["annotations"] = {k: _content(v) for k, v in sorted(self.annotations.items())}
        if self.template_dir:
            tdir = Path(self.template_dir)
            d["template_dir"] = {p.name: file_digest(p) for p in sorted(tdir.glob("*.tmpl"))}
        return sha256_hex(canonical_json(d))


def _content(path: str | None) -> str | None:
    if path is None:
        return None
    try:
        return "sha256:" + file_digest(path)
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc


def _build(cls, values: dict, where: str):
    if not isinstance(values, dict):
        raise ConfigError(f"{where} must be a mapping")
    known = {f.name for f in fields(cls)}
    unknown = set(values) - known
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(sorted(unknown))}")
    return cls(**values)


def load_config(path: str | os.PathLike) -> RunConfig:
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text(encoding="utf-8"))
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return RunConfig.from_dict(raw or {}, base_dir=path.parent)
