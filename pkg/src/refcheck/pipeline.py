"""End-to-end runs: generate, label, score, evaluate, with a resumable run directory.

Layout of a run directory::

    manifest.json      stage status, output digests, token usage
    config.json        resolved configuration
    corpus.jsonl       generated candidate references
    labels.jsonl       search labels, one per corpus line
    stages/*.jsonl     per-method raw scores (dq1, dq2, dq3, iq)
    scores.jsonl       labeled references with every score
    metrics/           summary.json, curves.json, roc_*.csv, fdr_*.csv
    report.json        run report
    cache/             completion cache records

Every stage reads its inputs from disk and writes its outputs before the
manifest marks it complete, so a run can stop anywhere and be resumed.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import metrics as m
from ._util import atomic_write_text, derive_seed, file_digest, read_jsonl, substream, write_jsonl
from .backends import OpenAIChatBackend, ReplayBackend
from .config import RunConfig
from .corpus import CandidateReference, generate_titles, load_taxonomy, sample_topics
from .direct import ensemble_dq, score_direct
from .errors import (
    BackendError,
    ConfigError,
    DigestMismatch,
    EmptyGeneration,
    ManifestCorrupt,
    MissingContext,
    RunIncomplete,
)
from .gateway import CompletionCache, Gateway, UsageMeter
from .indirect import LMOverlapJudge, StringOverlapJudge, ensemble_iq_dq, score_indirect
from .labeler import BingSearchBackend, FixtureSearchBackend, LabelRecord, label_titles
from .templates import TemplateSet

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1

STAGES = ("generate", "label", "dq1", "dq2", "dq3", "iq", "ensemble", "metrics")
METHODS = ("IQ", "DQ1", "DQ2", "DQ3", "DQ", "IQ+DQ")


def method_slug(method: str) -> str:
    return method.replace("+", "_")


@dataclass
class RunReport:
    data: dict
    wall_clock_s: float = 0.0

    def __getitem__(self, key):
        return self.data[key]


def _dumps(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, ensure_ascii=False) + "\n"


def _fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return "1" if x else "0"
    return repr(float(x))


@dataclass
class _Run:
    config: RunConfig
    run_dir: Path
    backend: object
    search_backend: object
    manifest: dict = field(default_factory=dict)

    def __post_init__(self):
        self.templates = TemplateSet(self.config.template_dir)
        self.gateway = Gateway(self.backend, CompletionCache(self.run_dir / "cache"), self.config.llm.policy)

    # manifest -----------------------------------------------------------

    def write_manifest(self) -> None:
        atomic_write_text(self.run_dir / "manifest.json", _dumps(self.manifest))

    def complete_stage(self, stage: str, outputs: list[str], **extra) -> None:
        self.manifest["stages"][stage] = {
            "status": "complete",
            "outputs": {name: file_digest(self.run_dir / name) for name in outputs},
            **extra,
        }
        self.write_manifest()

    def workers(self) -> int:
        return self.config.llm.policy.max_in_flight

    def meter(self) -> UsageMeter:
        return UsageMeter(self.gateway)

    # stages ----------------------------------------------------------------

    def stage_generate(self) -> None:
        cfg = self.config
        taxonomy = load_taxonomy(cfg.taxonomy_path)
        topics = sample_topics(taxonomy, cfg.n_topics, substream(cfg.seed, "topics"))
        meter = self.meter()

        def one(topic):
            try:
                return generate_titles(
                    topic, cfg.titles_per_topic, client=meter, templates=self.templates,
                    model_id=cfg.model_id, max_tokens=cfg.max_tokens.generate,
                )
            except EmptyGeneration as exc:
                logger.warning("%s", exc)
                return []

        with ThreadPoolExecutor(max_workers=self.workers()) as pool:
            batches = list(pool.map(one, topics))
        refs = [r for batch in batches for r in batch]
        empty = [str(t) for t, b in zip(topics, batches) if not b]
        write_jsonl(self.run_dir / "corpus.jsonl", [r.to_dict() for r in refs])
        self.complete_stage(
            "generate", ["corpus.jsonl"], usage=meter.totals(),
            counts={"topics": len(topics), "empty_generations": len(empty), "generated": len(refs)},
            empty_topics=empty,
        )

    def load_corpus(self) -> list[CandidateReference]:
        return [CandidateReference.from_dict(d) for d in read_jsonl(self.run_dir / "corpus.jsonl")]

    def load_labels(self) -> list[LabelRecord]:
        return [LabelRecord.from_dict(d) for d in read_jsonl(self.run_dir / "labels.jsonl")]

    def stage_label(self) -> None:
        corpus = self.load_corpus()
        records = label_titles(
            [r.title for r in corpus], self.search_backend,
            max_workers=self.config.search.max_in_flight,
            max_retries=self.config.search.max_retries,
            backoff_s=self.config.llm.policy.backoff_base_ms / 1000.0,
        )
        write_jsonl(self.run_dir / "labels.jsonl", [r.to_dict() for r in records])
        labeled = sum(r.label is not None for r in records)
        self.complete_stage(
            "label", ["labels.jsonl"],
            counts={"labeled": labeled, "unlabeled": len(records) - labeled},
        )

    def _scoring_targets(self) -> list[tuple[int, str]]:
        """(corpus index, title) of every labeled reference."""
        return [(i, lab.title) for i, lab in enumerate(self.load_labels()) if lab.label is not None]

    def _dq3_context(self, targets: list[tuple[int, str]], index: int, title: str) -> list[str]:
        pool = sorted({t for _, t in targets if t != title})
        k = min(self.config.dq3_context_size, len(pool))
        if k == 0:
            return []
        rng = substream(self.config.seed, "dq3-context", index)
        return [pool[j] for j in sorted(rng.choice(len(pool), size=k, replace=False))]

    def _run_scoring(self, stage: str, targets, score_one) -> None:
        meter = self.meter()

        def guarded(target):
            index, title = target
            try:
                return score_one(meter, index, title)
            except (BackendError, MissingContext) as exc:
                logger.warning("%s failed for %r: %s", stage, title, exc)
                return {"index": index, "title": title, "score": None, "error": type(exc).__name__}

        with ThreadPoolExecutor(max_workers=self.workers()) as pool:
            rows = list(pool.map(guarded, targets))
        if targets and all(r["score"] is None and r["error"] != "MissingContext" for r in rows):
            raise BackendError(f"stage {stage}: every request failed; backend looks unavailable")
        name = f"stages/{stage}.jsonl"
        write_jsonl(self.run_dir / name, rows)
        self.complete_stage(
            stage, [name], usage=meter.totals(),
            counts={"scored": sum(r["score"] is not None for r in rows), "unscored": sum(r["score"] is None for r in rows)},
        )

    def stage_direct(self, kind: str) -> None:
        cfg = self.config
        targets = self._scoring_targets()

        def one(meter, index, title):
            context = self._dq3_context(targets, index, title) if kind == "DQ3" else None
            ds = score_direct(
                kind, title, cfg.j_direct, context, client=meter, templates=self.templates,
                model_id=cfg.model_id, max_tokens=cfg.max_tokens.direct,
            )
            row = {"index": index, "title": title, "score": ds.score, "yes_count": ds.yes_count, "j": ds.j}
            if context is not None:
                row["context_titles"] = context
            return row

        self._run_scoring(kind.lower(), targets, one)

    def stage_iq(self) -> None:
        cfg = self.config
        targets = self._scoring_targets()

        def one(meter, index, title):
            if cfg.overlap_judge == "string":
                judge = StringOverlapJudge()
            else:
                judge = LMOverlapJudge(meter, self.templates, cfg.judge_model, cfg.max_tokens.judge)
            iq = score_indirect(
                title, cfg.i_indirect, client=meter, judge=judge, templates=self.templates,
                model_id=cfg.model_id, max_tokens=cfg.max_tokens.indirect,
            )
            return {
                "index": index,
                "title": title,
                "score": iq.score,
                "judgments": [{"pair": list(j.pair), "overlap": j.overlap, "judge_raw": j.judge_raw} for j in iq.judgments],
            }

        self._run_scoring("iq", targets, one)

    def stage_ensemble(self) -> None:
        corpus = self.load_corpus()
        labels = self.load_labels()
        per_stage = {}
        for stage in ("dq1", "dq2", "dq3", "iq"):
            per_stage[stage.upper()] = {r["index"]: r["score"] for r in read_jsonl(self.run_dir / f"stages/{stage}.jsonl")}
        rows = []
        for i, (ref, lab) in enumerate(zip(corpus, labels)):
            ref.label = lab.label
            s = {k: per_stage[k].get(i) for k in ("DQ1", "DQ2", "DQ3", "IQ")}
            dq = None if None in (s["DQ1"], s["DQ2"], s["DQ3"]) else ensemble_dq(s["DQ1"], s["DQ2"], s["DQ3"])
            both = None if dq is None or s["IQ"] is None else ensemble_iq_dq(s["IQ"], dq)
            ref.scores = {"DQ1": s["DQ1"], "DQ2": s["DQ2"], "DQ3": s["DQ3"], "DQ": dq, "IQ": s["IQ"], "IQ+DQ": both}
            rows.append(ref.to_dict())
        write_jsonl(self.run_dir / "scores.jsonl", rows)
        self.complete_stage("ensemble", ["scores.jsonl"])

    def stage_metrics(self) -> None:
        cfg = self.config
        refs = [CandidateReference.from_dict(d) for d in read_jsonl(self.run_dir / "scores.jsonl")]
        labeled = [r for r in refs if r.label is not None]
        summary = {
            "format_version": FORMAT_VERSION,
            "hallucination_rate": m.hallucination_rate([r.label for r in labeled]) if labeled else None,
            "methods": {},
            "kappa": self._kappa_table(labeled),
        }
        curves = {}
        outputs = ["metrics/summary.json", "metrics/curves.json"]
        for mi, method in enumerate(METHODS):
            data = [m.ScoredLabel(r.scores[method], r.label) for r in labeled if r.scores.get(method) is not None]
            entry = {"n": len(data), "unscored": len(labeled) - len(data)}
            try:
                mm = m.evaluate_scores(
                    data,
                    replicates=cfg.bootstrap_replicates,
                    bootstrap_seed=derive_seed(cfg.seed, "bootstrap", mi),
                    fdr_seed=derive_seed(cfg.seed, "fdr-extrapolation", mi),
                    fdr_draws=cfg.fdr_draws,
                )
            except m.DegenerateLabels as exc:
                entry["status"] = "insufficient_data"
                entry["detail"] = str(exc)
                summary["methods"][method] = entry
                continue
            lo, hi = mm.roc.auc_ci95
            _, se = m.delong_se(data)
            entry.update(status="ok", n_g=mm.n_g, n_h=mm.n_h, auc=mm.roc.auc, auc_se=se, auc_ci95=[lo, hi])
            summary["methods"][method] = entry
            curves[method] = _curve_payload(mm)
            slug = method_slug(method)
            atomic_write_text(self.run_dir / f"metrics/roc_{slug}.csv", _roc_csv(mm))
            atomic_write_text(self.run_dir / f"metrics/fdr_{slug}.csv", _fdr_csv(mm))
            outputs += [f"metrics/roc_{slug}.csv", f"metrics/fdr_{slug}.csv"]
        atomic_write_text(self.run_dir / "metrics/summary.json", _dumps(summary))
        atomic_write_text(self.run_dir / "metrics/curves.json", _dumps(curves))
        report = build_report(self.manifest, summary)
        atomic_write_text(self.run_dir / "report.json", _dumps(report))
        self.complete_stage("metrics", outputs + ["report.json"])

    def _kappa_table(self, labeled: list[CandidateReference]) -> list[dict]:
        raters = {"search": {r.title: r.label for r in labeled}}
        for name, path in sorted(self.config.annotations.items()):
            raters[name] = {row["title"]: row["label"] for row in read_jsonl(path)}
        names = list(raters)
        table = []
        for i, a in enumerate(names):
            for b in names[i + 1 :]:
                common = sorted(set(raters[a]) & set(raters[b]))
                if not common:
                    continue
                k = m.cohens_kappa([raters[a][t] for t in common], [raters[b][t] for t in common])
                table.append({"raters": [a, b], "n": len(common), "po": k.po, "pe": k.pe, "kappa": k.kappa})
        return table

    def run_stage(self, stage: str) -> None:
        logger.info("stage %s", stage)
        if stage == "generate":
            self.stage_generate()
        elif stage == "label":
            self.stage_label()
        elif stage in ("dq1", "dq2", "dq3"):
            self.stage_direct(stage.upper())
        elif stage == "iq":
            self.stage_iq()
        elif stage == "ensemble":
            self.stage_ensemble()
        elif stage == "metrics":
            self.stage_metrics()


def _curve_payload(mm: m.MethodMetrics) -> dict:
    roc, fdr = mm.roc, mm.fdr
    return {
        "roc": {
            "fpr": roc.fpr.tolist(),
            "tpr": roc.tpr.tolist(),
            "grid": roc.band.grid.tolist(),
            "tpr_at_grid": m.tpr_at(roc).tolist(),
            "band_mean": roc.band.mean.tolist(),
            "band_lo": roc.band.lo.tolist(),
            "band_hi": roc.band.hi.tolist(),
            "valid_replicates": roc.band.valid_replicates,
        },
        "fdr": {
            "preserved": fdr.preserved.tolist(),
            "fdr": fdr.fdr.tolist(),
            "extrapolated": fdr.extrapolated.tolist(),
            "grid": fdr.band.grid.tolist(),
            "fdr_at_grid": m.fdr_at(fdr).tolist(),
            "band_mean": fdr.band.mean.tolist(),
            "band_lo": fdr.band.lo.tolist(),
            "band_hi": fdr.band.hi.tolist(),
            "valid_replicates": fdr.band.valid_replicates,
        },
    }


def _csv(header: list[str], rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([_fmt(v) for v in row])
    return buf.getvalue()


def _roc_csv(mm: m.MethodMetrics) -> str:
    band = mm.roc.band
    return _csv(["fpr", "tpr", "band_lo", "band_hi"], zip(band.grid, m.tpr_at(mm.roc, band.grid), band.lo, band.hi))


def _fdr_csv(mm: m.MethodMetrics) -> str:
    band = mm.fdr.band
    achievable = mm.fdr.preserved[~mm.fdr.extrapolated].min()
    return _csv(
        ["preserved", "fdr", "extrapolated", "band_lo", "band_hi"],
        zip(band.grid, m.fdr_at(mm.fdr, band.grid), band.grid < achievable, band.lo, band.hi),
    )


def build_report(manifest: dict, summary: dict) -> dict:
    stages = manifest["stages"]
    tokens = {}
    total = {"batches": 0, "prompt_tokens": 0, "completion_tokens": 0}
    for stage in STAGES:
        usage = stages.get(stage, {}).get("usage")
        if usage is None:
            continue
        counts = stages[stage].get("counts", {})
        # per-query averages: one generation query per topic, one scoring query set per title
        if stage == "generate":
            n_items = counts.get("topics")
        else:
            n_items = counts.get("scored", 0) + counts.get("unscored", 0)
        tokens[stage] = {
            **usage,
            "mean_prompt_tokens": usage["prompt_tokens"] / n_items if n_items else None,
            "mean_completion_tokens": usage["completion_tokens"] / n_items if n_items else None,
        }
        for k in total:
            total[k] += usage[k]
    tokens["total"] = total
    gen = stages["generate"]["counts"]
    lab = stages["label"]["counts"]
    return {
        "format_version": FORMAT_VERSION,
        "config_digest": manifest["config_digest"],
        "model_id": manifest["model_id"],
        "counts": {
            "topics": gen["topics"],
            "empty_generations": gen["empty_generations"],
            "generated": gen["generated"],
            "labeled": lab["labeled"],
            "unlabeled": lab["unlabeled"],
            "unscored": {meth: summary["methods"][meth]["unscored"] for meth in METHODS},
        },
        "hallucination_rate": summary["hallucination_rate"],
        "methods": {
            meth: {k: v for k, v in entry.items() if k in ("status", "n", "n_g", "n_h", "auc", "auc_se", "auc_ci95")}
            for meth, entry in summary["methods"].items()
        },
        "kappa": summary["kappa"],
        "tokens": tokens,
    }


def build_backends(config: RunConfig):
    if config.llm.backend == "replay":
        backend = ReplayBackend.from_file(config.llm.replay_path)
    else:
        backend = OpenAIChatBackend(config.llm.base_url, config.llm.api_key_env, config.llm.policy.timeout_ms)
    if config.search.backend == "fixture":
        search = FixtureSearchBackend.from_file(config.search.fixture_path)
    else:
        search = BingSearchBackend(
            config.search.endpoint, config.search.api_key_env, config.search.params, config.llm.policy.timeout_ms
        )
    return backend, search


def _execute(run: _Run, start: int, stop_after: str | None) -> None:
    for stage in STAGES[start:]:
        run.run_stage(stage)
        if stage == stop_after:
            return


def _load_report(run_dir: Path, started: float) -> RunReport:
    path = run_dir / "report.json"
    data = json.loads(path.read_text(encoding="utf-8")) if path.exists() else {}
    return RunReport(data=data, wall_clock_s=time.monotonic() - started)


def run_pipeline(
    config: RunConfig,
    *,
    backend=None,
    search_backend=None,
    stop_after: str | None = None,
) -> RunReport:
    """Run every stage into ``config.output_dir``.

    An existing run directory with the same configuration is resumed rather
    than overwritten. ``stop_after`` ends the run after the named stage.
    """
    started = time.monotonic()
    if not config.output_dir:
        raise ConfigError("output_dir is required")
    if stop_after is not None and stop_after not in STAGES:
        raise ConfigError(f"unknown stage {stop_after!r}")
    if config.llm.backend == "replay" and not os.path.exists(config.llm.replay_path):
        raise ConfigError(f"replay file not found: {config.llm.replay_path}")
    if not os.path.exists(config.taxonomy_path):
        raise ConfigError(f"taxonomy file not found: {config.taxonomy_path}")
    run_dir = Path(config.output_dir)
    digest = config.digest()
    if (run_dir / "manifest.json").exists():
        manifest = _read_manifest(run_dir)
        if manifest.get("config_digest") != digest:
            raise ConfigError(f"{run_dir} holds a run with a different configuration")
        return resume(run_dir, backend=backend, search_backend=search_backend, stop_after=stop_after)
    if run_dir.exists() and any(run_dir.iterdir()):
        raise ConfigError(f"output directory {run_dir} is not empty")
    if backend is None or search_backend is None:
        built_llm, built_search = build_backends(config)
        backend = backend or built_llm
        search_backend = search_backend or built_search
    run_dir.mkdir(parents=True, exist_ok=True)
    stored = config.to_dict()
    stored.pop("output_dir")
    atomic_write_text(run_dir / "config.json", _dumps(stored))
    manifest = {
        "format_version": FORMAT_VERSION,
        "config_digest": digest,
        "model_id": config.model_id,
        "stages": {},
    }
    run = _Run(config, run_dir, backend, search_backend, manifest)
    run.write_manifest()
    _execute(run, 0, stop_after)
    return _load_report(run_dir, started)


def _read_manifest(run_dir: Path) -> dict:
    try:
        manifest = json.loads((run_dir / "manifest.json").read_text(encoding="utf-8"))
    except (OSError, ValueError) as exc:
        raise ManifestCorrupt(f"cannot read manifest in {run_dir}: {exc}") from exc
    if not isinstance(manifest, dict) or manifest.get("format_version") != FORMAT_VERSION or not isinstance(
        manifest.get("stages"), dict
    ):
        raise ManifestCorrupt(f"manifest in {run_dir} is malformed")
    return manifest


def _load_run_config(run_dir: Path) -> RunConfig:
    try:
        raw = json.loads((run_dir / "config.json").read_text(encoding="utf-8"))
    except (OSError, ValueError) as exc:
        raise ManifestCorrupt(f"cannot read config.json in {run_dir}: {exc}") from exc
    raw["output_dir"] = str(run_dir)
    return RunConfig.from_dict(raw)


def verify_stages(run_dir: Path, manifest: dict) -> int:
    """Index of the first stage that still has to run; raises if a finished stage was altered."""
    for i, stage in enumerate(STAGES):
        entry = manifest["stages"].get(stage)
        if not entry or entry.get("status") != "complete":
            return i
        for name, digest in entry.get("outputs", {}).items():
            path = run_dir / name
            if not path.exists() or file_digest(path) != digest:
                raise DigestMismatch(f"{name} does not match the digest recorded for stage {stage}")
    return len(STAGES)


def resume(run_dir: str | os.PathLike, *, backend=None, search_backend=None, stop_after: str | None = None) -> RunReport:
    """Continue a run from its first incomplete stage."""
    started = time.monotonic()
    run_dir = Path(run_dir)
    manifest = _read_manifest(run_dir)
    config = _load_run_config(run_dir)
    if config.digest() != manifest.get("config_digest"):
        raise DigestMismatch("configuration or its input files changed since the run started")
    start = verify_stages(run_dir, manifest)
    # drop anything recorded after the first incomplete stage
    for stage in STAGES[start:]:
        manifest["stages"].pop(stage, None)
    if start < len(STAGES):
        if backend is None or search_backend is None:
            built_llm, built_search = build_backends(config)
            backend = backend or built_llm
            search_backend = search_backend or built_search
        run = _Run(config, run_dir, backend, search_backend, manifest)
        run.write_manifest()
        _execute(run, start, stop_after)
    return _load_report(run_dir, started)


def export_report(run_dir: str | os.PathLike, format: str = "json", out_dir: str | os.PathLike | None = None) -> list[Path]:
    """Write the run summary and curves in a portable form; returns the written paths."""
    run_dir = Path(run_dir)
    manifest = _read_manifest(run_dir)
    if manifest["stages"].get("metrics", {}).get("status") != "complete":
        raise RunIncomplete(f"{run_dir} has not finished the metrics stage")
    verify_stages(run_dir, manifest)
    out = Path(out_dir) if out_dir else run_dir / "export"
    report = json.loads((run_dir / "report.json").read_text(encoding="utf-8"))
    curves = json.loads((run_dir / "metrics/curves.json").read_text(encoding="utf-8"))
    summary = json.loads((run_dir / "metrics/summary.json").read_text(encoding="utf-8"))
    if format == "json":
        path = out / "report.json"
        atomic_write_text(path, _dumps({"format_version": FORMAT_VERSION, "report": report, "summary": summary, "curves": curves}))
        return [path]
    if format == "csv-bundle":
        written = []
        for method in METHODS:
            if method not in curves:
                continue
            slug = method_slug(method)
            for kind in ("roc", "fdr"):
                src = run_dir / f"metrics/{kind}_{slug}.csv"
                dst = out / "csv" / f"{slug}_{kind}.csv"
                atomic_write_text(dst, src.read_text(encoding="utf-8"))
                written.append(dst)
        path = out / "csv" / "summary.json"
        atomic_write_text(path, _dumps({"format_version": FORMAT_VERSION, "report": report}))
        written.append(path)
        return written
    raise ConfigError(f"unknown export format {format!r}")
