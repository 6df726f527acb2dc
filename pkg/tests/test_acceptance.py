"""Acceptance suite: one printed PASS/FAIL line per criterion.

Run with ``pytest tests/test_acceptance.py -v -s`` to see the verdict lines
alongside pytest's own report; they are printed even without ``-s``.
"""

from __future__ import annotations

import json
import math
import time
from pathlib import Path

import httpx
import numpy as np
import pytest
from scipy.stats import norm

from refcheck.backends import ReplayBackend
from refcheck.direct import classify_completion, ensemble_dq, render_direct_prompt, score_direct
from refcheck.gateway import Gateway, PromptRequest, RawCompletion, cache_key
from refcheck.indirect import AuthorResponse, LMOverlapJudge, ensemble_iq_dq, estimate_overlap, score_indirect
from refcheck.metrics import (
    auc,
    cohens_kappa,
    delong_ci,
    evaluate_scores,
    fdr_at,
    fdr_curve,
    hallucination_rate,
    scored_labels,
)
from refcheck.pipeline import export_report, resume, run_pipeline

import oracles
from conftest import E2E, FakeBackend, tree_bytes


@pytest.fixture
def verdict(capsys):
    def report(name: str, ok: bool, detail: str) -> None:
        with capsys.disabled():
            print(f"\n[{'PASS' if ok else 'FAIL'}] {name}: {detail}")
        assert ok, f"{name}: {detail}"

    return report


def _dataset(rng, n):
    while True:
        labels = ["G" if x else "H" for x in rng.random(n) < rng.uniform(0.2, 0.8)]
        if 0 < labels.count("G") < n:
            break
    levels = int(rng.integers(2, 25))
    return [float(s) for s in rng.integers(0, levels, n) / levels], labels


def test_reproduction_not_desk_feasible(capsys):
    with capsys.disabled():
        print(
            "\n[SKIP] published-number reproduction: needs the proprietary hosted models; "
            "covered by the oracle criteria below"
        )
    pytest.skip("published-number reproduction needs proprietary hosted models")


def test_auc_oracle_equivalence(verdict):
    rng = np.random.default_rng(20240101)
    datasets = [_dataset(rng, int(rng.integers(2, 501))) for _ in range(200)]
    expected = [float(oracles.auc_pairs(s, l)) for s, l in datasets]
    start = time.perf_counter()
    got = [auc(scored_labels(s, l)) for s, l in datasets]
    elapsed = time.perf_counter() - start
    worst = max(abs(a - b) for a, b in zip(got, expected))
    verdict(
        "AUC oracle equivalence",
        worst <= 1e-12 and elapsed < 10.0,
        f"200 datasets, max |diff| = {worst:.2e} (tol 1e-12), {elapsed:.2f}s (limit 10s)",
    )


def test_auc_hand_example(verdict):
    value = auc(scored_labels([0.1, 0.4, 0.3, 0.9], ["H", "H", "G", "G"]))
    verdict("AUC hand example", value == 0.75, f"AUC = {value!r} (expected exactly 0.75)")


def test_delong_coverage(verdict):
    rng = np.random.default_rng(777)
    n_g = n_h = 60
    shift = 1.0
    truth = float(norm.cdf(shift / math.sqrt(2.0)))
    labels = ["G"] * n_g + ["H"] * n_h
    start = time.perf_counter()
    covered = 0
    for _ in range(1000):
        scores = np.concatenate([rng.normal(shift, 1.0, n_g), rng.normal(0.0, 1.0, n_h)])
        lo, hi = delong_ci(scored_labels(scores.tolist(), labels))
        covered += lo <= truth <= hi
    elapsed = time.perf_counter() - start
    rate = covered / 1000
    verdict(
        "DeLong coverage",
        0.92 <= rate <= 0.98 and elapsed < 60.0,
        f"true AUC {truth:.4f}, coverage {rate:.3f} (band [0.92, 0.98]), {elapsed:.2f}s (limit 60s)",
    )


def test_kappa(verdict):
    # rows: rater A, columns: rater B, order (G, H)
    a = ["G"] * 45 + ["H"] * 55
    b = ["G"] * 40 + ["H"] * 5 + ["G"] * 10 + ["H"] * 45
    k = cohens_kappa(a, b).kappa
    same = cohens_kappa(a, a).kappa
    # 100 items, 47 hallucinated, one disagreement
    c = ["H"] * 47 + ["G"] * 53
    d = ["H"] * 46 + ["G"] * 54
    scale = cohens_kappa(c, d).kappa
    ok = abs(k - 0.7) <= 1e-12 and same == 1.0 and scale >= 0.97
    verdict(
        "Cohen's kappa",
        ok,
        f"[[40,5],[10,45]] -> {k:.15f} (0.7 +/- 1e-12); identical -> {same}; 99/100 at 47% -> {scale:.4f} (>= 0.97)",
    )


def test_fdr_endpoints(verdict):
    rng = np.random.default_rng(99)
    mismatches = 0
    for _ in range(200):
        scores, labels = _dataset(rng, int(rng.integers(1, 300)))
        curve = fdr_curve(scored_labels(scores, labels), seed=0)
        at_one = curve.fdr[curve.preserved == 1.0]
        if len(at_one) != 1 or at_one[0] != hallucination_rate(labels) or fdr_at(curve, np.array([1.0]))[0] != at_one[0]:
            mismatches += 1
    hand = fdr_curve(scored_labels([0.9, 0.8, 0.7, 0.6], ["G", "H", "G", "H"]), seed=0)
    got = [(p, f) for p, f, e in hand.points if not e]
    want = [(0.25, 0.0), (0.5, 0.5), (0.75, 1 / 3), (1.0, 0.5)]
    hand_ok = len(got) == 4 and all(abs(p - q) <= 1e-12 and abs(f - g) <= 1e-12 for (p, f), (q, g) in zip(got, want))
    verdict(
        "FDR endpoints",
        mismatches == 0 and hand_ok,
        f"{200 - mismatches}/200 datasets end exactly at the hallucination rate; hand example {got}",
    )


def test_scoring_semantics(verdict):
    title = "Learning to Rank for Information Retrieval"
    prompt = render_direct_prompt("DQ1", title)
    request = PromptRequest(prompt_text=prompt, temperature=1.0, n_samples=10, max_tokens=64, model_id="m")
    completions = ["Yes"] * 7 + ["", "I'm not sure.", "No"]
    replay = ReplayBackend({cache_key(request): RawCompletion(completions)})
    dq = score_direct("DQ1", title, 10, client=Gateway(replay), model_id="m").score

    invalid = [classify_completion(t) for t in ("", "   ", "I cannot say.", "Maybe.", "the eyes")]

    class NeverJudge:
        def judge(self, *args):
            raise AssertionError("judge must not be consulted for a refusal")

    refusal = AuthorResponse(title, 1, "I could not find a specific reference with that title.", False)
    answer = AuthorResponse(title, 2, "Tie-Yan Liu", True)
    overlap = estimate_overlap(answer, refusal, NeverJudge()).overlap

    def iq_answer(req):
        if req.prompt_text.startswith("Who are the authors"):
            return ["Tie-Yan Liu", "T. Liu", "Hang Li"]
        return ["0.5"]

    gw = Gateway(FakeBackend(answer=iq_answer))
    pairs = len(score_indirect(title, 3, client=gw, judge=LMOverlapJudge(gw)).judgments)

    rng = np.random.default_rng(5)
    worst = 0.0
    for a, b, c in rng.random((20000, 3)):
        worst = max(worst, abs(ensemble_dq(a, b, c) - (a + b + c) / 3), abs(ensemble_iq_dq(a, b) - (a + b) / 2))
    ok = dq == 0.7 and invalid == ["no"] * 5 and overlap == 0.0 and pairs == 3 and worst <= 1e-15
    verdict(
        "Scoring semantics",
        ok,
        f"7/10 -> {dq!r}; invalid -> {set(invalid)}; refusal overlap {overlap}; i=3 -> {pairs} judgments; "
        f"ensemble max |diff| {worst:.1e} (tol 1e-15)",
    )


def test_end_to_end_determinism(verdict, tmp_path, monkeypatch, e2e_config):
    network = []

    def no_network(self, request, *args, **kwargs):
        network.append(request)
        raise RuntimeError("network access during a replay run")

    monkeypatch.setattr(httpx.Client, "send", no_network)
    golden = json.loads((E2E / "golden_report.json").read_text(encoding="utf-8"))
    start = time.perf_counter()

    first, second, resumed = e2e_config("first"), e2e_config("second"), e2e_config("resumed")
    run_pipeline(first)
    run_pipeline(second)
    run_pipeline(resumed, stop_after="dq2")
    resume(resumed.output_dir)
    trees = [tree_bytes(Path(c.output_dir)) for c in (first, second, resumed)]
    exports = []
    for i, c in enumerate((first, second, resumed)):
        (path,) = export_report(c.output_dir, "json", tmp_path / f"export{i}")
        exports.append(path.read_bytes())
    elapsed = time.perf_counter() - start

    identical = trees[0] == trees[1] == trees[2]
    same_export = exports[0] == exports[1] == exports[2] and json.loads(exports[0]) == golden
    ok = identical and same_export and not network and elapsed < 30.0
    verdict(
        "End-to-end determinism",
        ok,
        f"{len(trees[0])} files identical across repeat+resume: {identical}; export == golden: {same_export}; "
        f"live calls {len(network)}; {elapsed:.2f}s (limit 30s)",
    )


def test_separability_sweep(verdict):
    # default run scale: 200 topics x 5 titles, roughly half hallucinated
    n = 500
    labels = ["G"] * n + ["H"] * n
    lines, ok = [], True
    for target in (0.6, 0.75, 0.9):
        shift = math.sqrt(2.0) * norm.ppf(target)
        literal = truth_covered = 0
        for seed in range(100):
            rng = np.random.default_rng([int(target * 100), seed])
            raw = np.concatenate([rng.normal(shift, 1.0, n), rng.normal(0.0, 1.0, n)])
            # planted groundedness scores live in [0, 1] like every detector score
            scores = 1.0 / (1.0 + np.exp(-raw))
            mm = evaluate_scores(scored_labels(scores.tolist(), labels), replicates=20, bootstrap_seed=seed, fdr_seed=seed)
            lo, hi = mm.roc.auc_ci95
            literal += lo <= mm.roc.auc <= hi
            truth_covered += lo <= target <= hi
        ok &= literal >= 90 and truth_covered >= 90
        lines.append(f"AUC {target}: measured-in-CI {literal}/100, analytic-in-CI {truth_covered}/100")
    verdict("Synthetic separability sweep", ok, "; ".join(lines) + " (need >= 90)")
