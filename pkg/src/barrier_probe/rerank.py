"""Re-ranking candidate generation and candidate-set quality diagnostics.

Two ways to build an n-candidate hypothesis set for one source sentence: the
model's own top-n outputs, or top-1 decodes of n randomly barrier-edited
sources. Three summary measures compare them: the oracle (best achievable
BLEU, higher is better), coverage (reference-unigram recall of the candidate
union, higher is better) and diversity (mean pairwise BLEU between
candidates, lower means more diverse).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .estimators import RiskReport
from .gateway import DecodeCache, ModelHandle, decode_cached
from .metrics import sentence_bleu
from .text_core import AnnotatedCorpus, Edit, Sentence, apply_edit

TOPK = "topk"
BARRIER_EDIT = "barrier_edit"


class CandidateShortfallError(RuntimeError):
    """The model produced fewer hypotheses than the requested set size."""

    def __init__(self, wanted: int, got: int):
        super().__init__(f"model returned {got} candidates, {wanted} requested")
        self.wanted = wanted
        self.got = got


@dataclass(frozen=True)
class CandidateSet:
    """A fixed-size hypothesis collection for one source sentence."""

    source: Sentence
    candidates: tuple[Sentence, ...]
    provenance: str
    fallback_random_positions: bool = False

    def __post_init__(self) -> None:
        if not self.candidates:
            raise ValueError("candidate set must not be empty")

    def __len__(self) -> int:
        return len(self.candidates)


def candidates_topk(model: ModelHandle, x: Sentence, n: int) -> CandidateSet:
    """The model's n best hypotheses for one steady input.

    A shortfall is an error rather than silent padding: duplicating entries
    would corrupt the diversity statistic of any paired comparison.
    """

    if n < 1:
        raise ValueError("n must be at least 1")
    hyps = model.n_best(x, n)
    if len(hyps) < n:
        raise CandidateShortfallError(n, len(hyps))
    return CandidateSet(x, tuple(hyps[:n]), TOPK)


def candidates_barrier_edit(
    model: ModelHandle,
    cache: DecodeCache,
    x: Sentence,
    report: RiskReport,
    n: int,
    k: int,
    seed: int = 0,
) -> CandidateSet:
    """Top-1 decodes of n singly-edited sources targeting risky positions.

    Edit positions round-robin over the report's top-k defined-risk
    positions; each edit substitutes a uniformly random non-reserved token
    different from the original. When every position's risk is null the
    positions are drawn uniformly at random instead and the set is flagged.
    """

    if n < 1:
        raise ValueError("n must be at least 1")
    if report.length != len(x):
        raise ValueError("report does not describe this sentence")
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(report.example_id,)))
    take = min(k, report.ranking.non_null_count)
    fallback = take == 0
    if fallback:
        positions = [int(p) for p in rng.integers(0, len(x), size=min(k, len(x)))]
    else:
        positions = list(report.ranking.positions[:take])
    allowed = [
        v for v in range(len(model.vocab)) if v not in model.vocab.specials
    ]
    hyps = []
    for c in range(n):
        pos = positions[c % len(positions)]
        choices = [v for v in allowed if v != x[pos]]
        sub = int(choices[int(rng.integers(0, len(choices)))])
        edited = apply_edit(x, Edit(pos, sub))
        hyps.append(decode_cached(model, cache, edited))
    return CandidateSet(x, tuple(hyps), BARRIER_EDIT, fallback_random_positions=fallback)


def oracle(c: CandidateSet, ref: Sentence) -> float:
    """Best sentence BLEU any candidate achieves against the reference."""

    return max(sentence_bleu(hyp, ref).value for hyp in c.candidates)


def coverage(c: CandidateSet, ref: Sentence) -> float:
    """Share of the reference's distinct unigrams found anywhere in the set."""

    ref_unigrams = set(ref.ids)
    union: set[int] = set()
    for hyp in c.candidates:
        union.update(hyp.ids)
    return len(ref_unigrams & union) / len(ref_unigrams)


def diversity(c: CandidateSet) -> float:
    """Mean pairwise BLEU over ordered candidate pairs; lower is more diverse.

    BLEU is asymmetric, so both orders of every pair are scored; the
    normalizer is n*(n-1).
    """

    n = len(c)
    if n < 2:
        raise ValueError("diversity needs at least two candidates")
    total = math.fsum(
        sentence_bleu(c.candidates[i], c.candidates[j]).value
        for i in range(n)
        for j in range(n)
        if i != j
    )
    return total / (n * (n - 1))


@dataclass(frozen=True)
class RerankRow:
    task: str
    provenance: str
    oracle: float
    coverage: float
    diversity: float | None
    oracle_delta: float | None = None
    coverage_delta: float | None = None
    diversity_delta: float | None = None


def rerank_report(
    corpus: AnnotatedCorpus,
    model: ModelHandle,
    cache: DecodeCache,
    reports: Sequence[RiskReport],
    n: int,
    k: int,
    seed: int = 0,
    task: str = "toy",
) -> list[RerankRow]:
    """Corpus-mean oracle/coverage/diversity for both candidate provenances.

    The barrier row carries deltas against the top-k row. Diversity is
    undefined for n=1 and reported empty.
    """

    if len(reports) != len(corpus.examples):
        raise ValueError("reports and corpus cover different numbers of sentences")
    stats = {TOPK: {"oracle": [], "coverage": [], "diversity": []},
             BARRIER_EDIT: {"oracle": [], "coverage": [], "diversity": []}}
    for ex, rep in zip(corpus.examples, reports):
        sets = {
            TOPK: candidates_topk(model, ex.source, n),
            BARRIER_EDIT: candidates_barrier_edit(model, cache, ex.source, rep, n, k, seed),
        }
        for name, cset in sets.items():
            stats[name]["oracle"].append(oracle(cset, ex.reference))
            stats[name]["coverage"].append(coverage(cset, ex.reference))
            if n >= 2:
                stats[name]["diversity"].append(diversity(cset))

    def mean(vals: list[float]) -> float | None:
        return math.fsum(vals) / len(vals) if vals else None

    topk_row = RerankRow(
        task=task,
        provenance=TOPK,
        oracle=mean(stats[TOPK]["oracle"]),
        coverage=mean(stats[TOPK]["coverage"]),
        diversity=mean(stats[TOPK]["diversity"]),
    )
    barrier_oracle = mean(stats[BARRIER_EDIT]["oracle"])
    barrier_coverage = mean(stats[BARRIER_EDIT]["coverage"])
    barrier_diversity = mean(stats[BARRIER_EDIT]["diversity"])
    barrier_row = RerankRow(
        task=task,
        provenance=BARRIER_EDIT,
        oracle=barrier_oracle,
        coverage=barrier_coverage,
        diversity=barrier_diversity,
        oracle_delta=barrier_oracle - topk_row.oracle,
        coverage_delta=barrier_coverage - topk_row.coverage,
        diversity_delta=(
            barrier_diversity - topk_row.diversity if barrier_diversity is not None else None
        ),
    )
    return [topk_row, barrier_row]


def write_rerank_csv(rows: Sequence[RerankRow], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["task", "provenance", "oracle", "coverage", "diversity",
             "oracle_delta", "coverage_delta", "diversity_delta"]
        )
        for row in rows:
            writer.writerow([
                row.task,
                row.provenance,
                row.oracle,
                row.coverage,
                "" if row.diversity is None else row.diversity,
                "" if row.oracle_delta is None else row.oracle_delta,
                "" if row.coverage_delta is None else row.coverage_delta,
                "" if row.diversity_delta is None else row.diversity_delta,
            ])
