"""Acceptance suite: one test per release criterion, with frozen tolerances.

Each test prints a PASS line on success (run with ``pytest -s`` to see them
inline). Everything is deterministic given the seeds fixed here.
"""

from __future__ import annotations

import json
import subprocess
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from barrier_probe.analytics import (
    ibm1_em,
    inverse_frequency,
    overlap_vs_global,
    random_overlap_baseline,
)
from barrier_probe.cli import main as cli_main
from barrier_probe.estimators import (
    EstimatorConfig,
    estimate_risk_exact,
    estimate_risk_stratified,
    estimate_risk_uniform,
    simulate_estimators,
)
from barrier_probe.gateway import DecodeCache, ToyModel
from barrier_probe.metrics import kendall_w, overlap_at_k, rank_positions, sentence_bleu
from barrier_probe.rerank import CandidateSet, TOPK, coverage, diversity, oracle, rerank_report
from barrier_probe.text_core import Sentence, edit_set, sentence, write_corpus
from barrier_probe.toy import (
    SynthCorpusSpec,
    build_toy_model,
    gen_synth_corpus,
    toy_embed_grad,
    toy_nll,
    toy_vocab,
)

BARRIERS = tuple(range(2, 12))
SEED = 7
ADAPTER_DIR = Path(__file__).resolve().parents[1] / "adapter"
ADAPTER_SERVER = ADAPTER_DIR / "src" / "barrier_adapter" / "server.py"


@pytest.fixture(scope="module")
def model():
    return ToyModel(build_toy_model(seed=SEED, n_vocab=50, dim=16, barrier_set=BARRIERS))


@pytest.fixture(scope="module")
def main_corpus(model):
    return gen_synth_corpus(SynthCorpusSpec(n_sentences=50, seed=108), model.params)


@pytest.fixture(scope="module")
def main_cache():
    return DecodeCache()


@pytest.fixture(scope="module")
def exact_reports(model, main_corpus, main_cache):
    return [
        estimate_risk_exact(model, main_cache, ex.source, ex.reference, example_id=n)
        for n, ex in enumerate(main_corpus.examples)
    ]


@pytest.fixture(scope="module")
def single_barrier_corpus(model):
    return gen_synth_corpus(
        SynthCorpusSpec(n_sentences=200, seed=202, single_barrier=True), model.params
    )


def test_exact_degeneracy_bit_for_bit(model, main_corpus, main_cache, exact_reports):
    start = time.monotonic()
    for n, ex in enumerate(main_corpus.examples):
        size = len(edit_set(model.vocab, ex.source, 0))
        uniform = estimate_risk_uniform(
            model, main_cache, ex.source, ex.reference,
            EstimatorConfig(method="uniform", b=size, seed=5), example_id=n,
        )
        stratified = estimate_risk_stratified(
            model, main_cache, ex.source, ex.reference,
            EstimatorConfig(method="stratified", b=size, presample=size, seed=5),
            example_id=n,
        )
        for pe, pu, ps in zip(exact_reports[n].positions, uniform.positions, stratified.positions):
            assert pe.tm == pu.tm
            assert pe.tm == ps.tm
        assert uniform.ranking.positions == exact_reports[n].ranking.positions
        assert stratified.ranking.positions == exact_reports[n].ranking.positions
    elapsed = time.monotonic() - start
    assert elapsed < 120.0
    print(f"\nPASS: exact-degeneracy bit-for-bit on 50 sentences ({elapsed:.1f}s)")


def test_planted_barrier_recovery(model, single_barrier_corpus):
    start = time.monotonic()
    cache = DecodeCache()
    window = model.params.window
    top3_hits = 0
    far_outranks = 0
    n_sentences = len(single_barrier_corpus.examples)
    for n, ex in enumerate(single_barrier_corpus.examples):
        (planted,) = single_barrier_corpus.barrier_truth[n]
        report = estimate_risk_exact(model, cache, ex.source, ex.reference, example_id=n)
        order = list(report.ranking.positions)
        if planted in order[:3]:
            top3_hits += 1
        planted_rank = order.index(planted)
        if any(abs(q - planted) > window for q in order[:planted_rank]):
            far_outranks += 1
    elapsed = time.monotonic() - start
    assert top3_hits / n_sentences >= 0.90
    assert far_outranks / n_sentences < 0.05
    assert elapsed < 300.0
    print(
        f"\nPASS: planted-barrier recovery (top-3 {top3_hits / n_sentences:.1%}, "
        f"far-outranked {far_outranks / n_sentences:.1%}, {elapsed:.1f}s)"
    )


@pytest.fixture(scope="module")
def simulation_rows(model, main_corpus, main_cache, exact_reports):
    budgets = [5, 10, 25, 50, 100, 250, 500, 1000, 5000]
    start = time.monotonic()
    rows = simulate_estimators(
        main_corpus,
        model,
        main_cache,
        budgets=budgets,
        methods=("uniform", "stratified", "gradient"),
        k_values=(5, 10, 15),
        repeats=25,
        seed=SEED,
        exact_reports=exact_reports,
    )
    elapsed = time.monotonic() - start
    return rows, elapsed


def test_estimator_accuracy_trend(simulation_rows):
    rows, elapsed = simulation_rows
    budgets = [5, 10, 25, 50, 100, 250, 500, 1000, 5000]
    by_key = {(r.method, r.b, r.k): r for r in rows}
    for method in ("uniform", "stratified", "gradient"):
        for k in (5, 10, 15):
            series = [by_key[(method, b, k)].overlap for b in budgets]
            for before, after in zip(series, series[1:]):
                assert after >= before - 1e-9, (method, k, series)
    for k in (5, 10, 15):
        assert by_key[("uniform", 100, k)].overlap >= 0.7, k
    # The proposal-guided estimator tracks uniform accuracy at this budget.
    gap = abs(by_key[("gradient", 100, 5)].overlap - by_key[("uniform", 100, 5)].overlap)
    assert gap <= 0.15
    assert elapsed < 600.0
    at100 = {k: by_key[("uniform", 100, k)].overlap for k in (5, 10, 15)}
    print(f"\nPASS: estimator accuracy trend (uniform@100 overlaps {at100}, {elapsed:.1f}s)")


def test_variance_ordering(simulation_rows):
    rows, _ = simulation_rows
    by_key = {(r.method, r.b, r.k): r for r in rows}
    w_uniform = by_key[("uniform", 100, 5)].w
    w_stratified = by_key[("stratified", 100, 5)].w
    assert w_stratified >= w_uniform - 0.02
    for row in rows:
        assert -1e-12 <= row.w <= 1.0 + 1e-12
    edit_set_size = 48
    for row in rows:
        if row.b >= edit_set_size:
            assert row.w == pytest.approx(1.0)
    print(
        f"\nPASS: variance ordering (W uniform {w_uniform:.4f}, "
        f"stratified {w_stratified:.4f}, degenerate budgets give W=1)"
    )


def test_gradient_matches_finite_differences(model):
    p = model.params
    rng = np.random.default_rng(31)
    worst = 0.0
    for _ in range(100):
        length = int(rng.integers(2, 12))
        x = Sentence(tuple(int(v) for v in rng.integers(2, p.n_vocab, size=length)))
        y_len = max(1, length + int(rng.integers(-1, 2)))
        y = Sentence(tuple(int(v) for v in rng.integers(2, p.n_vocab, size=y_len)))
        i = int(rng.integers(0, length))
        analytic = toy_embed_grad(p, x, y, i)
        h = 1e-5
        numeric = np.zeros(p.dim)
        for m in range(p.dim):
            up = np.array(p.E)
            down = np.array(p.E)
            up[x[i], m] += h
            down[x[i], m] -= h
            numeric[m] = (
                toy_nll(replace(p, E=up), x, y) - toy_nll(replace(p, E=down), x, y)
            ) / (2 * h)
        rel = np.linalg.norm(analytic - numeric) / max(np.linalg.norm(numeric), 1e-10)
        worst = max(worst, rel)
        assert rel < 1e-4
    print(f"\nPASS: gradient vs central finite differences (worst rel err {worst:.2e})")


def test_metric_unit_suite():
    s = sentence(2, 3, 4, 5, 6)
    assert sentence_bleu(s, s).value == pytest.approx(1.0, abs=1e-12)
    assert sentence_bleu(sentence(2, 3), sentence(4, 5)).value == 0.0

    r1 = rank_positions([3.0, 6.0, 5.0, 4.0, 2.0, 1.0])  # top-3 = {1, 2, 3}
    r2 = rank_positions([3.0, 6.0, 5.0, 2.0, 1.0, 4.0])  # top-3 = {1, 2, 5}
    assert overlap_at_k(r1, r2, 3) == pytest.approx(2 / 3)
    assert overlap_at_k(r1, r1, 4) == 1.0

    assert kendall_w([[1, 2, 3], [1, 2, 3]]) == pytest.approx(1.0)
    assert kendall_w([[1, 2, 3], [3, 2, 1]]) == pytest.approx(0.0)

    a = sentence(2, 3, 4)
    assert diversity(CandidateSet(a, (a, a), TOPK)) == pytest.approx(1.0)
    ref = sentence(5, 6, 7)
    with_ref = CandidateSet(ref, (sentence(9, 9, 9), ref), TOPK)
    assert oracle(with_ref, ref) == pytest.approx(1.0)
    assert coverage(with_ref, ref) == pytest.approx(1.0)

    rng = np.random.default_rng(41)
    for _ in range(1000):
        ref = Sentence(tuple(int(v) for v in rng.integers(2, 9, size=5)))
        cands = [Sentence(tuple(int(v) for v in rng.integers(2, 9, size=5))) for _ in range(3)]
        small = CandidateSet(ref, tuple(cands[:2]), TOPK)
        grown = CandidateSet(ref, tuple(cands), TOPK)
        assert coverage(grown, ref) >= coverage(small, ref)
    print("\nPASS: metric unit suite (BLEU, overlap@k, Kendall's W, oracle/coverage/diversity)")


def test_baseline_near_randomness(model, main_corpus, exact_reports):
    stat = inverse_frequency(main_corpus)
    gaps = {}
    for k in (5, 10, 15):
        mean, baseline = overlap_vs_global(exact_reports, main_corpus, stat, k)
        gaps[k] = abs(mean - baseline)
        assert gaps[k] <= 0.1, (k, mean, baseline)
    print(f"\nPASS: inverse-frequency baseline near random (gaps {gaps})")


def test_reranking_direction(model, single_barrier_corpus):
    cache = DecodeCache()
    reports = [
        estimate_risk_exact(model, cache, ex.source, ex.reference, example_id=n)
        for n, ex in enumerate(single_barrier_corpus.examples)
    ]
    topk_row, barrier_row = rerank_report(
        single_barrier_corpus, model, cache, reports, n=8, k=3, seed=11
    )
    assert barrier_row.oracle > topk_row.oracle
    assert barrier_row.coverage > topk_row.coverage
    assert barrier_row.diversity < topk_row.diversity
    print(
        "\nPASS: re-ranking direction (oracle "
        f"+{barrier_row.oracle - topk_row.oracle:.3f}, coverage "
        f"+{barrier_row.coverage - topk_row.coverage:.3f}, diversity "
        f"{barrier_row.diversity - topk_row.diversity:+.3f})"
    )


def test_ibm1_em_convergence():
    pairs = [
        (sentence(2), sentence(2)),
        (sentence(2, 3), sentence(2, 3)),
        (sentence(3), sentence(3)),
    ]
    lex, lls = ibm1_em(pairs, iterations=10)
    for before, after in zip(lls, lls[1:]):
        assert after >= before - 1e-12
    assert lex.prob(2, 2) > 0.9
    assert lex.prob(3, 3) > 0.9

    rng = np.random.default_rng(51)
    random_pairs = []
    for _ in range(40):
        n = int(rng.integers(1, 7))
        random_pairs.append(
            (
                Sentence(tuple(int(v) for v in rng.integers(2, 15, size=n))),
                Sentence(tuple(int(v) for v in rng.integers(2, 15, size=n))),
            )
        )
    _, lls_random = ibm1_em(random_pairs, iterations=12)
    for before, after in zip(lls_random, lls_random[1:]):
        assert after >= before - 1e-12
    print(f"\nPASS: IBM-1 EM (monotone log-likelihood; hand corpus phi > 0.9 in 10 iterations)")


def _detect_config(tmp_path: Path, out_dir: Path, cache: Path | None, **estimator) -> Path:
    params = build_toy_model(seed=SEED, n_vocab=50, dim=16, barrier_set=BARRIERS)
    corpus = gen_synth_corpus(SynthCorpusSpec(n_sentences=12, seed=303), params)
    src, ref = tmp_path / "src.txt", tmp_path / "ref.txt"
    if not src.exists():
        write_corpus(corpus, toy_vocab(50), src, ref)
    config = {
        "model": {"toy": {"seed": SEED, "n_vocab": 50, "dim": 16, "barrier_ids": list(BARRIERS)}},
        "corpus": {"src": str(src), "refs": [str(ref)]},
        "estimator": {"method": "uniform", "b": 25, **estimator},
        "cache": str(cache) if cache else None,
        "output_dir": str(out_dir),
        "seed": 13,
    }
    path = tmp_path / f"config_{out_dir.name}.json"
    path.write_text(json.dumps(config), encoding="utf-8")
    return path


def test_cache_and_determinism(tmp_path):
    cache = tmp_path / "cache.jsonl"
    cold_out, warm_out, jobs_out = tmp_path / "cold", tmp_path / "warm", tmp_path / "jobs"
    cfg = _detect_config(tmp_path, cold_out, cache)
    assert cli_main(["detect", "--config", str(cfg)]) == 0
    cfg_warm = _detect_config(tmp_path, warm_out, cache)
    assert cli_main(["detect", "--config", str(cfg_warm)]) == 0
    cold_reports = (cold_out / "reports.jsonl").read_bytes()
    assert (warm_out / "reports.jsonl").read_bytes() == cold_reports
    warm_summary = json.loads((warm_out / "summary.json").read_text(encoding="utf-8"))
    assert warm_summary["model_calls"]["decode"] == 0
    assert warm_summary["model_calls"]["nll"] == 0
    assert warm_summary["cache"]["hit_rate"] == 1.0

    cfg_jobs = _detect_config(tmp_path, jobs_out, None)
    assert cli_main(["detect", "--config", str(cfg_jobs), "--jobs", "4"]) == 0
    assert (jobs_out / "reports.jsonl").read_bytes() == cold_reports
    print("\nPASS: cache/determinism (warm rerun byte-identical, zero model calls, jobs-invariant)")


# --- secondary component -------------------------------------------------


def _mock_corpus(tmp_path: Path) -> tuple[Path, Path]:
    # Vocabulary m002..m029 (size 30). The reference is the mock's decode of a
    # one-token-perturbed source, so that position carries a non-null risk.
    def rot(v: int) -> int:
        return 2 + (v - 2 + 1) % 28

    sources = [
        [5, 6, 7, 8, 9],
        [10, 11, 12, 13],
        [14, 15, 16, 17, 18, 19],
    ]
    perturbed_pos = [1, 2, 0]
    src_lines = []
    ref_lines = []
    for ids, pos in zip(sources, perturbed_pos):
        edited = list(ids)
        edited[pos] = (edited[pos] + 7 - 2) % 28 + 2
        src_lines.append(" ".join(f"m{v:03d}" for v in ids))
        ref_lines.append(" ".join(f"m{rot(v):03d}" for v in edited))
    src, ref = tmp_path / "mock_src.txt", tmp_path / "mock_ref.txt"
    src.write_text("\n".join(src_lines) + "\n", encoding="utf-8")
    ref.write_text("\n".join(ref_lines) + "\n", encoding="utf-8")
    return src, ref


def test_secondary_protocol_conformance(tmp_path):
    golden = subprocess.run(
        [sys.executable, "-m", "pytest", str(ADAPTER_DIR / "tests"), "-q"],
        capture_output=True,
        text=True,
    )
    assert golden.returncode == 0, golden.stdout + golden.stderr

    src, ref = _mock_corpus(tmp_path)
    out = tmp_path / "mock_out"
    config = {
        "model": {"command": [sys.executable, str(ADAPTER_SERVER), "--vocab-size", "30"]},
        "corpus": {"src": str(src), "refs": [str(ref)]},
        "estimator": {"method": "uniform", "b": 40},
        "output_dir": str(out),
        "seed": 3,
    }
    cfg = tmp_path / "mock_config.json"
    cfg.write_text(json.dumps(config), encoding="utf-8")
    assert cli_main(["detect", "--config", str(cfg)]) == 0
    lines = (out / "reports.jsonl").read_text(encoding="utf-8").splitlines()
    assert len(lines) == 3
    reports = [json.loads(line) for line in lines]
    # The perturbed position has an edit reproducing the reference exactly.
    assert any(
        pos["tm"] is not None for rep in reports for pos in rep["positions"]
    )

    out_grad = tmp_path / "mock_out_grad"
    assert cli_main(
        ["detect", "--config", str(cfg), "--method", "gradient", "-b", "10",
         "--output-dir", str(out_grad)]
    ) == 0
    summary = json.loads((out_grad / "summary.json").read_text(encoding="utf-8"))
    assert summary["fallbacks"] == 3
    grad_reports = [
        json.loads(line)
        for line in (out_grad / "reports.jsonl").read_text(encoding="utf-8").splitlines()
    ]
    assert all(rep["config"]["fallback_from"] == "gradient" for rep in grad_reports)
    assert all(rep["config"]["method"] == "uniform" for rep in grad_reports)
    print("\nPASS: secondary protocol conformance (golden replay, e2e detect, capability fallback)")
