"""Truncated mean, the exact oracle, the three estimators and the simulation."""

from __future__ import annotations

import numpy as np
import pytest

from barrier_probe.estimators import (
    EstimatorConfig,
    Histogram,
    counterfactual_scores,
    detect_barriers,
    empirical_tm_bias,
    derive_seed,
    estimate_risk,
    estimate_risk_exact,
    estimate_risk_gradient,
    estimate_risk_stratified,
    estimate_risk_uniform,
    report_from_json,
    report_to_json,
    simulate_estimators,
    stratified_presample,
    truncated_mean,
    write_histogram_csv,
    write_simulation_csv,
)
from barrier_probe.gateway import CapabilityError, DecodeCache, ModelHandle, ToyModel
from barrier_probe.text_core import Sentence, edit_set, sentence
from barrier_probe.toy import SynthCorpusSpec, build_toy_model, gen_synth_corpus

BARRIERS = tuple(range(2, 12))


@pytest.fixture(scope="module")
def model():
    return ToyModel(build_toy_model(seed=7, n_vocab=50, dim=16, barrier_set=BARRIERS))


@pytest.fixture(scope="module")
def cache():
    return DecodeCache()


def single_barrier_sentence(model) -> tuple[Sentence, Sentence, int]:
    """A 10-token sentence with one planted barrier at position 4."""

    ids = [20, 21, 22, 23, BARRIERS[0], 25, 26, 27, 28, 29]
    src = Sentence(tuple(ids))
    return src, Sentence(tuple(ids)), 4


def barrier_free_sentence() -> tuple[Sentence, Sentence]:
    ids = (20, 21, 22, 23, 24, 25, 26, 27)
    return Sentence(ids), Sentence(ids)


def test_truncated_mean_hand_cases():
    h = Histogram(scores=(0.10, 0.20, 0.30, 0.40), m_o=0.25)
    assert truncated_mean(h) == pytest.approx(0.35)
    assert truncated_mean(Histogram(scores=(0.1, 0.2), m_o=0.5)) is None
    same = Histogram(scores=(0.35, 0.35, 0.35), m_o=0.25)
    assert truncated_mean(same) == pytest.approx(0.35)


def test_histogram_bin_counts_sum_to_score_count():
    rng = np.random.default_rng(0)
    scores = tuple(float(v) for v in rng.random(200))
    h = Histogram(scores=scores, m_o=0.5)
    assert h.bin_counts().sum() == 200
    assert len(h.bin_counts()) == 50
    assert set(h.orange_band) == {v for v in scores if v > 0.5}


def test_counterfactual_scores_counts_full_edit_set(model, cache):
    x, y, _ = single_barrier_sentence(model)
    edits = edit_set(model.vocab, x, 0)
    h = counterfactual_scores(model, cache, x, y, 0, edits)
    assert len(h.scores) == len(edits) == 48


def test_counterfactual_scores_orange_empty_when_original_is_perfect(model, cache):
    x, y = barrier_free_sentence()
    h = counterfactual_scores(model, cache, x, y, 3, edit_set(model.vocab, x, 3))
    assert h.m_o == pytest.approx(1.0)
    assert h.orange_band == ()


def test_counterfactual_scores_orange_nonempty_at_barrier(model, cache):
    x, y, pos = single_barrier_sentence(model)
    h = counterfactual_scores(model, cache, x, y, pos, edit_set(model.vocab, x, pos))
    assert len(h.orange_band) > 0


def test_counterfactual_scores_rejects_foreign_position(model, cache):
    x, y, _ = single_barrier_sentence(model)
    with pytest.raises(ValueError):
        counterfactual_scores(model, cache, x, y, 1, edit_set(model.vocab, x, 0))


def test_tm_invariant_to_edit_evaluation_order(model, cache):
    x, y, pos = single_barrier_sentence(model)
    edits = edit_set(model.vocab, x, pos)
    forward = counterfactual_scores(model, cache, x, y, pos, edits)
    backward = counterfactual_scores(model, cache, x, y, pos, list(reversed(edits)))
    assert forward.scores == backward.scores
    assert truncated_mean(forward) == truncated_mean(backward)


def test_exact_report_shape(model, cache):
    x, y, _ = single_barrier_sentence(model)
    report = estimate_risk_exact(model, cache, x, y, example_id=3)
    assert report.example_id == 3
    assert len(report.positions) == 10
    assert all(p.evaluated == 48 for p in report.positions)
    assert all(p.histogram is not None for p in report.positions)
    assert len(report.ranking.positions) == 10


def test_uniform_with_full_budget_reproduces_exact_bit_for_bit(model, cache):
    x, y, _ = single_barrier_sentence(model)
    exact = estimate_risk_exact(model, cache, x, y)
    size = len(edit_set(model.vocab, x, 0))
    cfg = EstimatorConfig(method="uniform", b=size, seed=123)
    est = estimate_risk_uniform(model, cache, x, y, cfg)
    for pe, pu in zip(exact.positions, est.positions):
        assert pe.tm == pu.tm  # bit-for-bit, not approx
    assert est.ranking.positions == exact.ranking.positions


def test_stratified_with_full_budgets_reproduces_exact_bit_for_bit(model, cache):
    x, y, _ = single_barrier_sentence(model)
    exact = estimate_risk_exact(model, cache, x, y)
    size = len(edit_set(model.vocab, x, 0))
    cfg = EstimatorConfig(method="stratified", b=size, presample=size, seed=9)
    est = estimate_risk_stratified(model, cache, x, y, cfg)
    for pe, ps in zip(exact.positions, est.positions):
        assert pe.tm == ps.tm
    assert est.ranking.positions == exact.ranking.positions


def test_fixed_seed_reproduces_reports(model, cache):
    x, y, _ = single_barrier_sentence(model)
    for method in ("uniform", "stratified", "gradient"):
        cfg = EstimatorConfig(
            method=method, b=10, presample=20 if method == "stratified" else None, seed=5
        )
        first = estimate_risk(model, cache, x, y, cfg, example_id=1)
        second = estimate_risk(model, cache, x, y, cfg, example_id=1)
        assert report_to_json(first) == report_to_json(second)


def test_uniform_budget_enlargement_extends_the_sample(model, cache):
    # Same seed: the b=5 candidate set is a subset of the b=12 candidate set,
    # so scores already evaluated never change, only the support grows.
    x, y, pos = single_barrier_sentence(model)
    small = estimate_risk_uniform(model, cache, x, y, EstimatorConfig(method="uniform", b=5, seed=3))
    large = estimate_risk_uniform(model, cache, x, y, EstimatorConfig(method="uniform", b=12, seed=3))
    small_h = counterfactual_scores(
        model, cache, x, y, pos, edit_set(model.vocab, x, pos)
    )
    assert small.positions[pos].evaluated == 5
    assert large.positions[pos].evaluated == 12
    # Rebuild the sampled edit sets to compare supports directly.
    from barrier_probe.estimators import _position_rng, _split_edits

    subs, delete = _split_edits(edit_set(model.vocab, x, pos))
    perm_small = _position_rng(3, 0, pos).permutation(len(subs))[:4]
    perm_large = _position_rng(3, 0, pos).permutation(len(subs))[:11]
    assert set(perm_small.tolist()) <= set(perm_large.tolist())


def test_delete_always_in_candidate_set(model, cache):
    x, y, pos = single_barrier_sentence(model)
    # b=1 leaves room only for the forced deletion.
    rep = estimate_risk_uniform(model, cache, x, y, EstimatorConfig(method="uniform", b=1, seed=0))
    assert all(p.evaluated == 1 for p in rep.positions)
    # Deleting the barrier repairs its neighborhood, so even at b=1 the
    # barrier position scores a defined risk.
    assert rep.positions[pos].tm is not None


def test_stratified_requires_presample_at_least_b():
    with pytest.raises(ValueError):
        EstimatorConfig(method="stratified", b=10, presample=5)


def test_stratified_presample_schedule():
    assert stratified_presample(100) == 500
    assert stratified_presample(499) == 500
    assert stratified_presample(500) == 1000
    assert stratified_presample(1000) == 2000
    assert stratified_presample(5000) == 10000
    assert stratified_presample(750) == 1500


def test_null_positions_never_outrank_defined_ones(model, cache):
    x, y, _ = single_barrier_sentence(model)
    report = estimate_risk_exact(model, cache, x, y)
    seen_null = False
    for pos in report.ranking.positions:
        tm = report.positions[pos].tm
        if tm is None:
            seen_null = True
        else:
            assert not seen_null


def test_detect_barriers_rules(model, cache):
    x, y = barrier_free_sentence()
    all_null = estimate_risk_exact(model, cache, x, y)
    assert detect_barriers(all_null, 3) == set()

    xb, yb, pos = single_barrier_sentence(model)
    rep = estimate_risk_exact(model, cache, xb, yb)
    top = detect_barriers(rep, 50)
    assert top == {p.position for p in rep.positions if p.tm is not None}
    assert pos in detect_barriers(rep, 3)
    with pytest.raises(ValueError):
        detect_barriers(rep, 0)


class PointMassModel(ModelHandle):
    """Toy wrapper whose proposal concentrates all mass on one token."""

    def __init__(self, inner: ToyModel, target: int):
        self.inner = inner
        self.vocab = inner.vocab
        self.vocab_id = inner.vocab_id + "-pointmass"
        self.capabilities = inner.capabilities
        self.target = target
        self.reset_counters()

    def decode(self, x):
        return self.inner.decode(x)

    def nll(self, x, y):
        return self.inner.nll(x, y)

    def proposal(self, x, y, i):
        probs = np.zeros(len(self.vocab))
        probs[self.target] = 1.0
        return probs

    def n_best(self, x, k):
        return self.inner.n_best(x, k)


def test_gradient_point_mass_proposal_always_sampled(model, cache):
    x, y, _ = single_barrier_sentence(model)
    target = 40
    point = PointMassModel(model, target)
    cfg = EstimatorConfig(method="gradient", b=2, seed=11)
    rep = estimate_risk_gradient(point, DecodeCache(), x, y, cfg)
    # b=2 buys the deletion plus exactly one substitution, which must be the
    # point-mass target at every position where it is a legal substitute.
    for pos in range(len(x)):
        assert rep.positions[pos].evaluated == 2


def test_gradient_requires_proposal_capability(model):
    class NoProposal(PointMassModel):
        def __init__(self, inner):
            super().__init__(inner, 2)
            self.capabilities = frozenset({"decode", "nll", "nbest"})

    x, y, _ = single_barrier_sentence(model)
    stripped = NoProposal(model)
    with pytest.raises(CapabilityError):
        estimate_risk_gradient(stripped, DecodeCache(), x, y, EstimatorConfig(method="gradient", b=5))
    # The dispatch layer degrades to uniform and records the substitution.
    rep = estimate_risk(stripped, DecodeCache(), x, y, EstimatorConfig(method="gradient", b=5, seed=1))
    assert rep.config.method == "uniform"
    assert rep.config.fallback_from == "gradient"


def test_gradient_report_deterministic(model, cache):
    x, y, _ = single_barrier_sentence(model)
    cfg = EstimatorConfig(method="gradient", b=7, seed=21)
    a = estimate_risk_gradient(model, cache, x, y, cfg)
    b = estimate_risk_gradient(model, cache, x, y, cfg)
    assert report_to_json(a) == report_to_json(b)


def test_empirical_tm_bias_converges_to_a_limit(model, cache):
    x, y, pos = single_barrier_sentence(model)
    out = empirical_tm_bias(model, cache, x, y, pos, b=10, resamples=1000, seed=2)
    assert out["exact_tm"] is not None
    defined = [e for e in out["estimates"] if e is not None]
    first = sum(defined[: len(defined) // 2]) / (len(defined) // 2)
    second = sum(defined[len(defined) // 2 :]) / (len(defined) - len(defined) // 2)
    assert abs(first - second) < 0.01
    assert out["defined_fraction"] == 1.0  # deletion is forced into every sample


def test_report_json_round_trip(model, cache):
    x, y, _ = single_barrier_sentence(model)
    rep = estimate_risk_uniform(model, cache, x, y, EstimatorConfig(method="uniform", b=6, seed=4), example_id=9)
    line = report_to_json(rep)
    back = report_from_json(line)
    assert report_to_json(back) == line
    assert back.ranking == rep.ranking


def test_simulation_grid_schema_and_degenerate_rows(model, tmp_path):
    # k <= min sentence length, so identical rankings overlap at exactly 1.0.
    spec = SynthCorpusSpec(n_sentences=6, seed=13, min_len=10, max_len=14)
    corpus = gen_synth_corpus(spec, ToyModel(build_toy_model(seed=7, n_vocab=50, dim=16, barrier_set=BARRIERS)).params)
    local_cache = DecodeCache()
    rows = simulate_estimators(
        corpus,
        model,
        local_cache,
        budgets=[5, 48],
        methods=("uniform", "stratified"),
        k_values=(5, 10),
        repeats=3,
        seed=17,
    )
    assert len(rows) == 2 * 2 * 2
    by_key = {(r.method, r.b, r.k): r for r in rows}
    for method in ("uniform", "stratified"):
        for k in (5, 10):
            degenerate = by_key[(method, 48, k)]
            assert degenerate.overlap == pytest.approx(1.0)
            assert degenerate.w == pytest.approx(1.0)
    for row in rows:
        assert 0.0 <= row.overlap <= 1.0
        assert 0.0 <= row.w <= 1.0 + 1e-12
        assert row.sec_per_sentence >= 0.0
    out = tmp_path / "sim.csv"
    write_simulation_csv(rows, out)
    header = out.read_text(encoding="utf-8").splitlines()[0]
    assert header == "method,b,k,overlap,W,sec_per_sentence"


def test_histogram_csv_counts_sum_to_edit_count(model, tmp_path):
    cache_local = DecodeCache()
    x, y, _ = single_barrier_sentence(model)
    rep = estimate_risk_exact(model, cache_local, x, y)
    path = tmp_path / "hist.csv"
    write_histogram_csv([rep], path)
    import csv as csv_mod

    with open(path, encoding="utf-8") as fh:
        rows = list(csv_mod.DictReader(fh))
    per_position: dict[int, int] = {}
    for row in rows:
        per_position[int(row["position"])] = per_position.get(int(row["position"]), 0) + int(row["count"])
    assert all(count == 48 for count in per_position.values())


def test_derive_seed_streams_are_distinct():
    seeds = {derive_seed(7, r) for r in range(50)}
    assert len(seeds) == 50
