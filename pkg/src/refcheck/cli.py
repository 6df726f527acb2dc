"""Command-line entry point.

Exit codes: 0 success, 2 configuration error, 3 backend failure,
4 integrity failure (corrupt manifest, tampered stage output, incomplete run).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import pipeline
from ._util import read_jsonl
from .config import load_config
from .direct import score_direct
from .errors import (
    BackendError,
    ConfigError,
    DigestMismatch,
    LengthMismatch,
    ManifestCorrupt,
    MissingContext,
    NOutOfRange,
    RunIncomplete,
    SearchBackendUnavailable,
)
from .gateway import CompletionCache, Gateway
from .indirect import LMOverlapJudge, StringOverlapJudge, score_indirect
from .metrics import cohens_kappa
from .templates import TemplateSet

EXIT_OK, EXIT_CONFIG, EXIT_BACKEND, EXIT_INTEGRITY = 0, 2, 3, 4


def _print_report(report: pipeline.RunReport) -> None:
    print(json.dumps(report.data, indent=2, sort_keys=True))
    print(f"wall clock: {report.wall_clock_s:.2f}s", file=sys.stderr)


def cmd_run(args) -> int:
    config = load_config(args.config)
    if args.output_dir:
        config.output_dir = str(Path(args.output_dir).resolve())
    _print_report(pipeline.run_pipeline(config, stop_after=args.stop_after))
    return EXIT_OK


def cmd_resume(args) -> int:
    _print_report(pipeline.resume(args.run_dir))
    return EXIT_OK


def cmd_export(args) -> int:
    for path in pipeline.export_report(args.run_dir, args.format, args.out):
        print(path)
    return EXIT_OK


def cmd_score_title(args) -> int:
    config = load_config(args.config)
    backend, _ = pipeline.build_backends(config)
    cache = CompletionCache(args.cache_dir) if args.cache_dir else None
    gateway = Gateway(backend, cache, config.llm.policy)
    templates = TemplateSet(config.template_dir)
    method = args.method.upper()
    if method == "IQ":
        if config.overlap_judge == "string":
            judge = StringOverlapJudge()
        else:
            judge = LMOverlapJudge(gateway, templates, config.judge_model, config.max_tokens.judge)
        iq = score_indirect(
            args.title, config.i_indirect, client=gateway, judge=judge, templates=templates,
            model_id=config.model_id, max_tokens=config.max_tokens.indirect,
        )
        out = {
            "title": iq.title,
            "method": "IQ",
            "score": iq.score,
            "judgments": [{"pair": list(j.pair), "overlap": j.overlap} for j in iq.judgments],
        }
    else:
        ds = score_direct(
            method, args.title, config.j_direct, args.context or None, client=gateway,
            templates=templates, model_id=config.model_id, max_tokens=config.max_tokens.direct,
        )
        out = {"title": ds.title, "method": ds.kind, "score": ds.score, "yes_count": ds.yes_count, "j": ds.j}
    print(json.dumps(out, indent=2))
    return EXIT_OK


def cmd_kappa(args) -> int:
    a = {r["title"]: r["label"] for r in read_jsonl(args.first)}
    b = {r["title"]: r["label"] for r in read_jsonl(args.second)}
    common = sorted(set(a) & set(b))
    if not common:
        raise ConfigError("the two label files share no titles")
    k = cohens_kappa([a[t] for t in common], [b[t] for t in common])
    print(json.dumps({"n": len(common), "po": k.po, "pe": k.pe, "kappa": k.kappa}, indent=2))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="refcheck", description="Detect hallucinated references with self-consistency queries.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run the full pipeline from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--output-dir", help="override output_dir from the config")
    p.add_argument("--stop-after", choices=pipeline.STAGES)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("resume", help="continue an interrupted run")
    p.add_argument("run_dir")
    p.set_defaults(func=cmd_resume)

    p = sub.add_parser("export", help="export report and curves of a finished run")
    p.add_argument("run_dir")
    p.add_argument("--format", choices=("json", "csv-bundle"), default="json")
    p.add_argument("--out", help="output directory (default: <run_dir>/export)")
    p.set_defaults(func=cmd_export)

    p = sub.add_parser("score-title", help="score one title ad hoc")
    p.add_argument("--config", required=True)
    p.add_argument("--title", required=True)
    p.add_argument("--method", required=True, choices=("iq", "dq1", "dq2", "dq3"))
    p.add_argument("--context", action="append", help="comparison title for dq3 (repeatable)")
    p.add_argument("--cache-dir")
    p.set_defaults(func=cmd_score_title)

    p = sub.add_parser("kappa", help="Cohen's kappa between two label files")
    p.add_argument("first")
    p.add_argument("second")
    p.set_defaults(func=cmd_kappa)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except (ConfigError, NOutOfRange, MissingContext, LengthMismatch) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (BackendError, SearchBackendUnavailable) as exc:
        print(f"backend failure: {exc}", file=sys.stderr)
        return EXIT_BACKEND
    except (ManifestCorrupt, DigestMismatch, RunIncomplete) as exc:
        print(f"integrity failure: {exc}", file=sys.stderr)
        return EXIT_INTEGRITY


if __name__ == "__main__":
    sys.exit(main())
