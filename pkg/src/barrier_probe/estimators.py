"""Counterfactual risk estimation: score sets, truncated mean, and estimators.

For a source position, the counterfactual score set holds one smoothed
sentence-BLEU value per evaluated edit; the truncated mean averages the
scores strictly above the unedited sentence's score (the histogram's orange
band) and is null when nothing beats it. The exact oracle evaluates the whole
edit set; three budgeted estimators evaluate a sampled candidate set and
support the truncated mean on the sample instead:

    uniform     deletion plus a uniform without-replacement draw of
                substitutions, one deletion slot charged against the budget
    stratified  a uniform pre-sample is ranked by the model loss of the
                edited source against the reference (cheap, no decoding) and
                only the lowest-loss ``b`` candidates are decoded
    gradient    substitutions are drawn without replacement from the model's
                one-step-embedding-update proposal via Gumbel top-k

All sampling is without replacement: a duplicate edit would waste decode
budget and skew the truncated-mean weighting. Deletion is force-included in
every candidate set so the three estimators explore the same edit space (the
proposal distribution covers substitutions only; deletion has no embedding
row). Sampled edits are evaluated in the canonical edit-set order, which
makes the truncated mean independent of sampling order and lets exhaustive
budgets reproduce the exact oracle bit for bit.

Per-position random streams derive from (seed, example id, position), so
reports are identical regardless of evaluation order or worker count.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .gateway import CapabilityError, DecodeCache, ModelHandle, decode_cached
from .metrics import Ranking, kendall_w, overlap_at_k, rank_positions, ranks_by_item, sentence_bleu
from .text_core import AnnotatedCorpus, Edit, Sentence, apply_edit, edit_set

logger = logging.getLogger(__name__)

DEFAULT_BINS = 50
DEFAULT_BIN_RANGE = (0.0, 1.0)

# BLEU of a fixed (hypothesis, reference) pair is a constant; the simulation
# harness rescoring the same cached decodes across repeats hits this memo.
_bleu_memo: dict[tuple[tuple[int, ...], tuple[int, ...]], float] = {}


def _bleu_value(hyp: Sentence, ref: Sentence) -> float:
    key = (hyp.ids, ref.ids)
    value = _bleu_memo.get(key)
    if value is None:
        value = sentence_bleu(hyp, ref).value
        _bleu_memo[key] = value
    return value


@dataclass(frozen=True)
class Histogram:
    """Counterfactual score multiset for one position, plus the original score."""

    scores: tuple[float, ...]
    m_o: float
    bin_range: tuple[float, float] = DEFAULT_BIN_RANGE
    n_bins: int = DEFAULT_BINS

    @property
    def orange_band(self) -> tuple[float, ...]:
        return tuple(v for v in self.scores if v > self.m_o)

    def bin_counts(self) -> np.ndarray:
        counts, _ = np.histogram(self.scores, bins=self.n_bins, range=self.bin_range)
        return counts

    def bin_edges(self) -> np.ndarray:
        return np.linspace(self.bin_range[0], self.bin_range[1], self.n_bins + 1)


def truncated_mean(h: Histogram) -> float | None:
    """Mean of the orange band; null when no edit beats the original score."""

    band = h.orange_band
    if not band:
        return None
    return math.fsum(band) / len(band)


@dataclass(frozen=True)
class EstimatorConfig:
    """Which estimator to run and with what budget and seed."""

    method: str = "stratified"
    b: int | None = None
    presample: int | None = None
    seed: int = 0
    repeats: int = 1
    fallback_from: str | None = None

    def __post_init__(self) -> None:
        if self.method not in ("exact", "uniform", "stratified", "gradient"):
            raise ValueError(f"unknown estimator method {self.method!r}")
        if self.method != "exact":
            if self.b is None or self.b < 1:
                raise ValueError("budget b must be at least 1")
        if self.method == "stratified":
            if self.presample is None:
                raise ValueError("stratified estimation requires a pre-sample budget")
            if self.presample < self.b:
                raise ValueError("pre-sample budget must be at least b")


def stratified_presample(b: int) -> int:
    """Default pre-sample budget for a given decode budget."""

    if b < 500:
        return 500
    if b == 500:
        return 1000
    if b == 1000:
        return 2000
    if b == 5000:
        return 10000
    return 2 * b


@dataclass(frozen=True)
class PositionRisk:
    """Risk summary for one source position."""

    position: int
    tm: float | None
    evaluated: int
    orange_count: int
    histogram: Histogram | None = None


@dataclass(frozen=True)
class RiskReport:
    """Per-sentence risk estimates and the ranking they induce."""

    example_id: int
    length: int
    config: EstimatorConfig
    positions: tuple[PositionRisk, ...]
    ranking: Ranking


def counterfactual_scores(
    model: ModelHandle,
    cache: DecodeCache,
    x: Sentence,
    y: Sentence,
    i: int,
    edits: Sequence[Edit],
) -> Histogram:
    """Decode and score every edit of ``x`` at position ``i`` against ``y``.

    Edits are evaluated in canonical order (ascending substitute id, deletion
    last) regardless of the order supplied, so the resulting score tuple is a
    pure function of the edit set.
    """

    for e in edits:
        if e.position != i:
            raise ValueError("edit does not target the requested position")
    ordered = sorted(edits, key=Edit.sort_key)
    m_o = _bleu_value(decode_cached(model, cache, x), y)
    scores = tuple(
        _bleu_value(decode_cached(model, cache, apply_edit(x, e)), y) for e in ordered
    )
    return Histogram(scores=scores, m_o=m_o)


def _position_rng(seed: int, example_id: int, position: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(example_id, position)))


def _split_edits(edits: Sequence[Edit]) -> tuple[list[Edit], Edit | None]:
    subs = [e for e in edits if not e.is_delete]
    deletes = [e for e in edits if e.is_delete]
    return subs, (deletes[0] if deletes else None)


def _assemble_report(
    model: ModelHandle,
    cache: DecodeCache,
    x: Sentence,
    y: Sentence,
    cfg: EstimatorConfig,
    example_id: int,
    sampled: Sequence[Sequence[Edit]],
    keep_histograms: bool,
) -> RiskReport:
    risks = []
    tms: list[float | None] = []
    for i in range(len(x)):
        hist = counterfactual_scores(model, cache, x, y, i, sampled[i])
        tm = truncated_mean(hist)
        tms.append(tm)
        risks.append(
            PositionRisk(
                position=i,
                tm=tm,
                evaluated=len(hist.scores),
                orange_count=len(hist.orange_band),
                histogram=hist if keep_histograms else None,
            )
        )
    return RiskReport(
        example_id=example_id,
        length=len(x),
        config=cfg,
        positions=tuple(risks),
        ranking=rank_positions(tms),
    )


def estimate_risk_exact(
    model: ModelHandle,
    cache: DecodeCache,
    x: Sentence,
    y: Sentence,
    example_id: int = 0,
) -> RiskReport:
    """Ground-truth truncated means from whole-vocabulary decoding."""

    cfg = EstimatorConfig(method="exact")
    sampled = [edit_set(model.vocab, x, i) for i in range(len(x))]
    return _assemble_report(model, cache, x, y, cfg, example_id, sampled, keep_histograms=True)


def estimate_risk_uniform(
    model: ModelHandle,
    cache: DecodeCache,
    x: Sentence,
    y: Sentence,
    cfg: EstimatorConfig,
    example_id: int = 0,
) -> RiskReport:
    """Uniform without-replacement sampling of min(b, |edit set|) edits.

    The substitution sample is the prefix of one seeded permutation, so
    enlarging the budget extends the sample instead of reshuffling it.
    """

    sampled = []
    for i in range(len(x)):
        subs, delete = _split_edits(edit_set(model.vocab, x, i))
        rng = _position_rng(cfg.seed, example_id, i)
        perm = rng.permutation(len(subs))
        quota = cfg.b - 1 if delete is not None else cfg.b
        chosen = [subs[j] for j in perm[: min(quota, len(subs))]]
        if delete is not None:
            chosen.append(delete)
        sampled.append(chosen)
    return _assemble_report(model, cache, x, y, cfg, example_id, sampled, keep_histograms=False)


def estimate_risk_stratified(
    model: ModelHandle,
    cache: DecodeCache,
    x: Sentence,
    y: Sentence,
    cfg: EstimatorConfig,
    example_id: int = 0,
) -> RiskReport:
    """Two-stage estimation: loss-ranked pre-sample, deterministic top-b decode.

    Stage one uniformly samples substitutions (deletion holds one reserved
    slot of both budgets); stage two computes the model loss of each edited
    source against the reference and keeps the lowest-loss b-1 substitutions.
    Only those survivors are decoded.
    """

    sampled = []
    for i in range(len(x)):
        subs, delete = _split_edits(edit_set(model.vocab, x, i))
        rng = _position_rng(cfg.seed, example_id, i)
        perm = rng.permutation(len(subs))
        stage_quota = cfg.presample - 1 if delete is not None else cfg.presample
        pool = [subs[j] for j in perm[: min(stage_quota, len(subs))]]
        losses = [
            (model.nll(apply_edit(x, e), y), e.token, e) for e in pool
        ]
        losses.sort(key=lambda item: (item[0], item[1]))
        quota = cfg.b - 1 if delete is not None else cfg.b
        chosen = [e for _, _, e in losses[: min(quota, len(losses))]]
        if delete is not None:
            chosen.append(delete)
        sampled.append(chosen)
    return _assemble_report(model, cache, x, y, cfg, example_id, sampled, keep_histograms=False)


def estimate_risk_gradient(
    model: ModelHandle,
    cache: DecodeCache,
    x: Sentence,
    y: Sentence,
    cfg: EstimatorConfig,
    example_id: int = 0,
) -> RiskReport:
    """Proposal-guided sampling via Gumbel top-k over the substitution weights.

    The model's proposal vector is masked at the original token and the
    reserved ids, renormalized, and b-1 substitutions are drawn without
    replacement; deletion fills the remaining slot. Zero-weight tokens are
    never drawn, so the sample may be smaller than the budget when the
    proposal support is narrow.
    """

    if "proposal" not in model.capabilities:
        raise CapabilityError(
            f"model {model.vocab_id!r} has no proposal capability; "
            "use the uniform or stratified estimator"
        )
    specials = model.vocab.specials
    sampled = []
    for i in range(len(x)):
        subs, delete = _split_edits(edit_set(model.vocab, x, i))
        weights = np.array(model.proposal(x, y, i), dtype=float, copy=True)
        weights[x[i]] = 0.0
        for s in specials:
            weights[s] = 0.0
        total = weights.sum()
        rng = _position_rng(cfg.seed, example_id, i)
        quota = cfg.b - 1 if delete is not None else cfg.b
        if total <= 0.0:
            # Degenerate proposal: nothing to prefer, fall back to uniform draw.
            perm = rng.permutation(len(subs))
            chosen = [subs[j] for j in perm[: min(quota, len(subs))]]
        else:
            weights /= total
            gumbel = rng.gumbel(size=weights.shape[0])
            with np.errstate(divide="ignore"):
                keys = np.where(weights > 0.0, np.log(weights) + gumbel, -np.inf)
            support = int((weights > 0.0).sum())
            take = min(quota, support)
            top = np.argsort(-keys, kind="stable")[:take]
            chosen = [Edit(i, int(v)) for v in top]
        if delete is not None:
            chosen.append(delete)
        sampled.append(chosen)
    return _assemble_report(model, cache, x, y, cfg, example_id, sampled, keep_histograms=False)


def estimate_risk(
    model: ModelHandle,
    cache: DecodeCache,
    x: Sentence,
    y: Sentence,
    cfg: EstimatorConfig,
    example_id: int = 0,
) -> RiskReport:
    """Dispatch on the configured method, degrading gradient to uniform.

    When gradient estimation is requested but the model lacks the proposal
    capability, the uniform estimator runs at the same budget and the report
    records the substitution in ``config.fallback_from``.
    """

    if cfg.method == "exact":
        return estimate_risk_exact(model, cache, x, y, example_id)
    if cfg.method == "uniform":
        return estimate_risk_uniform(model, cache, x, y, cfg, example_id)
    if cfg.method == "stratified":
        return estimate_risk_stratified(model, cache, x, y, cfg, example_id)
    if "proposal" in model.capabilities:
        return estimate_risk_gradient(model, cache, x, y, cfg, example_id)
    logger.warning(
        "model %s lacks the proposal capability; falling back to uniform sampling",
        model.vocab_id,
    )
    fallback = replace(cfg, method="uniform", fallback_from="gradient")
    return estimate_risk_uniform(model, cache, x, y, fallback, example_id)


def detect_barriers(report: RiskReport, k: int) -> set[int]:
    """Top-k risky positions, truncated to those with a defined risk."""

    if k < 1:
        raise ValueError("k must be at least 1")
    take = min(k, report.ranking.non_null_count)
    return set(report.ranking.positions[:take])


def empirical_tm_bias(
    model: ModelHandle,
    cache: DecodeCache,
    x: Sentence,
    y: Sentence,
    i: int,
    b: int,
    resamples: int,
    seed: int = 0,
) -> dict:
    """Empirical distribution of the uniform estimate at one position.

    A subsampled truncated mean is not an unbiased estimator of the
    population truncated mean in general, so rather than asserting
    unbiasedness this reports the resampling mean alongside the exact value.
    """

    exact_tm = truncated_mean(
        counterfactual_scores(model, cache, x, y, i, edit_set(model.vocab, x, i))
    )
    estimates = []
    for r in range(resamples):
        cfg = EstimatorConfig(method="uniform", b=b, seed=derive_seed(seed, r))
        rep = estimate_risk_uniform(model, cache, x, y, cfg, example_id=0)
        estimates.append(rep.positions[i].tm)
    defined = [e for e in estimates if e is not None]
    mean_est = math.fsum(defined) / len(defined) if defined else None
    return {
        "exact_tm": exact_tm,
        "mean_estimate": mean_est,
        "defined_fraction": len(defined) / len(estimates),
        "estimates": estimates,
    }


def derive_seed(seed: int, stream: int) -> int:
    """Stable child seed for an independent sampling stream (e.g. one repeat)."""

    return int(np.random.SeedSequence(seed, spawn_key=(0xBA5E, stream)).generate_state(1)[0])


@dataclass(frozen=True)
class SimulationRow:
    method: str
    b: int
    k: int
    overlap: float
    w: float
    sec_per_sentence: float


def simulate_estimators(
    corpus: AnnotatedCorpus,
    model: ModelHandle,
    cache: DecodeCache,
    budgets: Sequence[int],
    methods: Sequence[str] = ("uniform", "stratified", "gradient"),
    k_values: Sequence[int] = (5, 10, 15),
    repeats: int = 25,
    seed: int = 0,
    exact_reports: Sequence[RiskReport] | None = None,
) -> list[SimulationRow]:
    """Estimator-comparison grid: overlap@k vs exact, rank stability, timing.

    For every (method, budget) cell the estimation is repeated ``repeats``
    times with independent seeds; overlap@k is averaged over sentences and
    repeats, Kendall's W is computed per sentence across the repeated
    rankings and averaged, and wall time is averaged per sentence estimate.
    """

    if exact_reports is None:
        exact_reports = [
            estimate_risk_exact(model, cache, ex.source, ex.reference, example_id=n)
            for n, ex in enumerate(corpus.examples)
        ]
    rows: list[SimulationRow] = []
    for method in methods:
        for b in budgets:
            presample = stratified_presample(b) if method == "stratified" else None
            elapsed = 0.0
            overlaps = {k: [] for k in k_values}
            rank_vectors: list[list[list[int]]] = [[] for _ in corpus.examples]
            for r in range(repeats):
                cfg = EstimatorConfig(
                    method=method, b=b, presample=presample, seed=derive_seed(seed, r)
                )
                start = time.monotonic()
                reports = [
                    estimate_risk(model, cache, ex.source, ex.reference, cfg, example_id=n)
                    for n, ex in enumerate(corpus.examples)
                ]
                elapsed += time.monotonic() - start
                for n, rep in enumerate(reports):
                    for k in k_values:
                        overlaps[k].append(overlap_at_k(rep.ranking, exact_reports[n].ranking, k))
                    rank_vectors[n].append(ranks_by_item(rep.ranking))
            if repeats >= 2:
                w_values = [kendall_w(vectors) for vectors in rank_vectors]
                mean_w = math.fsum(w_values) / len(w_values)
            else:
                mean_w = 1.0
            sec = elapsed / (len(corpus.examples) * repeats)
            for k in k_values:
                mean_overlap = math.fsum(overlaps[k]) / len(overlaps[k])
                rows.append(SimulationRow(method, b, k, mean_overlap, mean_w, sec))
    return rows


def write_simulation_csv(rows: Iterable[SimulationRow], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["method", "b", "k", "overlap", "W", "sec_per_sentence"])
        for row in rows:
            writer.writerow([row.method, row.b, row.k, row.overlap, row.w, row.sec_per_sentence])


def write_histogram_csv(reports: Iterable[RiskReport], path: str | Path) -> None:
    """Dump per-position score histograms for external plotting.

    Bins straddling the original score are split into a below-or-equal part
    and an orange part, so per-position counts still sum to the number of
    evaluated edits.
    """

    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["example_id", "position", "bin_low", "count", "in_orange"])
        for rep in reports:
            for pos in rep.positions:
                hist = pos.histogram
                if hist is None:
                    continue
                edges = hist.bin_edges()
                lows = edges[:-1]
                highs = edges[1:]
                for j in range(hist.n_bins):
                    in_bin = [
                        v
                        for v in hist.scores
                        if lows[j] <= v < highs[j] or (j == hist.n_bins - 1 and v == highs[j])
                    ]
                    if not in_bin:
                        continue
                    orange = sum(1 for v in in_bin if v > hist.m_o)
                    blue = len(in_bin) - orange
                    if blue:
                        writer.writerow([rep.example_id, pos.position, repr(float(lows[j])), blue, 0])
                    if orange:
                        writer.writerow([rep.example_id, pos.position, repr(float(lows[j])), orange, 1])


def report_to_json(report: RiskReport) -> str:
    """Canonical one-line JSON form of a report (histograms omitted)."""

    payload = {
        "example_id": report.example_id,
        "length": report.length,
        "config": {
            "method": report.config.method,
            "b": report.config.b,
            "presample": report.config.presample,
            "seed": report.config.seed,
            "fallback_from": report.config.fallback_from,
        },
        "positions": [
            {
                "position": p.position,
                "tm": p.tm,
                "evaluated": p.evaluated,
                "orange": p.orange_count,
            }
            for p in report.positions
        ],
        "ranking": {
            "positions": list(report.ranking.positions),
            "scores": list(report.ranking.scores),
        },
    }
    return json.dumps(payload, sort_keys=True, separators=(",", ":"))


def report_from_json(line: str) -> RiskReport:
    payload = json.loads(line)
    cfg_raw = payload["config"]
    cfg = EstimatorConfig(
        method=cfg_raw["method"],
        b=cfg_raw["b"],
        presample=cfg_raw["presample"],
        seed=cfg_raw["seed"],
        fallback_from=cfg_raw.get("fallback_from"),
    )
    positions = tuple(
        PositionRisk(
            position=p["position"],
            tm=p["tm"],
            evaluated=p["evaluated"],
            orange_count=p["orange"],
        )
        for p in payload["positions"]
    )
    ranking = Ranking(
        tuple(payload["ranking"]["positions"]),
        tuple(payload["ranking"]["scores"]),
        payload["length"],
    )
    return RiskReport(
        example_id=payload["example_id"],
        length=payload["length"],
        config=cfg,
        positions=positions,
        ranking=ranking,
    )
