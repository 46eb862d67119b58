"""Smoothed sentence-level BLEU and rank-comparison statistics.

All functions here are pure and safe to call concurrently.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass
from typing import Sequence

from .text_core import Sentence

MAX_NGRAM = 4


@dataclass(frozen=True, slots=True)
class BleuScore:
    """BLEU-4 with add-one smoothing for n >= 2 n-gram precisions.

    ``value`` equals ``brevity_penalty`` times the geometric mean of the four
    precisions and lies in [0, 1].
    """

    value: float
    ngram_precisions: tuple[float, float, float, float]
    brevity_penalty: float


def _ngram_counts(ids: Sequence[int], n: int) -> Counter:
    return Counter(tuple(ids[i : i + n]) for i in range(len(ids) - n + 1))


def sentence_bleu(hyp: Sentence, ref: Sentence) -> BleuScore:
    """Smoothed sentence-level BLEU-4 of a hypothesis against one reference.

    Unigram precision is unsmoothed (zero unigram overlap scores zero); for
    n >= 2 both the clipped match count and the total count get +1. The
    brevity penalty is exp(1 - |ref|/|hyp|) for hypotheses shorter than the
    reference and 1 otherwise.
    """

    if len(ref) == 0:
        raise ValueError("reference must be non-empty")
    h, r = hyp.ids, ref.ids
    if len(h) == 0:
        return BleuScore(0.0, (0.0, 1.0, 1.0, 1.0), 1.0)

    precisions = []
    for n in range(1, MAX_NGRAM + 1):
        total = max(len(h) - n + 1, 0)
        if total == 0:
            matches = 0
        else:
            hyp_counts = _ngram_counts(h, n)
            ref_counts = _ngram_counts(r, n)
            matches = sum(min(c, ref_counts[g]) for g, c in hyp_counts.items())
        if n == 1:
            precisions.append(matches / total)
        else:
            precisions.append((matches + 1) / (total + 1))

    bp = math.exp(1.0 - len(r) / len(h)) if len(h) < len(r) else 1.0
    if precisions[0] == 0.0:
        value = 0.0
    else:
        value = bp * math.exp(math.fsum(math.log(p) for p in precisions) / MAX_NGRAM)
    return BleuScore(value, tuple(precisions), bp)


@dataclass(frozen=True)
class Ranking:
    """Positions of one sentence ordered most-risky first.

    ``scores`` parallels ``positions``; ``None`` marks a position whose risk
    is undefined (empty orange band). Non-null scores are non-increasing and
    every null-scored position ranks after every non-null one.
    """

    positions: tuple[int, ...]
    scores: tuple[float | None, ...]
    length: int

    def __post_init__(self) -> None:
        if len(self.positions) != len(self.scores):
            raise ValueError("positions and scores must be parallel")
        if len(set(self.positions)) != len(self.positions):
            raise ValueError("positions must not repeat")
        if any(not 0 <= p < self.length for p in self.positions):
            raise ValueError("positions must lie inside the sentence")
        seen_null = False
        prev = math.inf
        for s in self.scores:
            if s is None:
                seen_null = True
            else:
                if seen_null:
                    raise ValueError("null-scored positions must rank last")
                if s > prev:
                    raise ValueError("non-null scores must be non-increasing")
                prev = s

    @property
    def non_null_count(self) -> int:
        return sum(1 for s in self.scores if s is not None)

    def top_k(self, k: int) -> tuple[int, ...]:
        """Leading ``min(k, len(positions))`` positions of the ranking."""

        return self.positions[: min(k, len(self.positions))]


def rank_positions(tm_values: Sequence[float | None]) -> Ranking:
    """Total ranking induced by per-position risk values.

    Non-null values sort descending with ties broken by ascending position;
    null values follow, by ascending position. The result covers every
    position, which keeps Kendall's W well-defined without tie corrections.
    """

    n = len(tm_values)
    order = sorted(
        range(n),
        key=lambda i: (0, -tm_values[i], i) if tm_values[i] is not None else (1, 0, i),
    )
    return Ranking(tuple(order), tuple(tm_values[i] for i in order), n)


def overlap_at_k(r1: Ranking, r2: Ranking, k: int) -> float:
    """Shared fraction of the two rankings' top-k position sets.

    Each side contributes its leading min(k, ranked-position) entries; the
    intersection size is divided by k regardless, so short rankings are
    penalized symmetrically.
    """

    if k < 1:
        raise ValueError("k must be at least 1")
    if r1.length != r2.length:
        raise ValueError("rankings cover sentences of different lengths")
    t1 = set(r1.top_k(k))
    t2 = set(r2.top_k(k))
    return len(t1 & t2) / k


def ranks_by_item(r: Ranking) -> list[int]:
    """Rank (1-based) of each position under ``r``, indexed by position.

    Requires a total ranking: every position of the sentence must appear.
    """

    if len(r.positions) != r.length:
        raise ValueError("ranking must cover every position")
    ranks = [0] * r.length
    for rank0, pos in enumerate(r.positions):
        ranks[pos] = rank0 + 1
    return ranks


def kendall_w(rankings: Sequence[Sequence[int]]) -> float:
    """Kendall's coefficient of concordance over full rank vectors.

    Each element of ``rankings`` assigns a rank in 1..n to every one of the n
    items; W is 1 when all rankings agree and 0 under maximal discordance.
    """

    k = len(rankings)
    if k < 2:
        raise ValueError("need at least two rankings")
    n = len(rankings[0])
    if n < 2:
        raise ValueError("need at least two items")
    expected = set(range(1, n + 1))
    for r in rankings:
        if len(r) != n:
            raise ValueError("all rankings must cover the same number of items")
        if set(r) != expected:
            raise ValueError("each ranking must be a permutation of 1..n")
    x = [sum(r[i] for r in rankings) for i in range(n)]
    sum_x = sum(x)
    sum_x2 = sum(v * v for v in x)
    denom = k * k * (n**3 - n) / 12.0
    return (sum_x2 - sum_x * sum_x / n) / denom
