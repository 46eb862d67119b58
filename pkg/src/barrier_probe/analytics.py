"""Corpus-level characterization of detected barrier words.

Covers the baseline troublesome-word statistics (inverse frequency,
translation entropy, exception rate), their overlap against detected-barrier
rankings with a closed-form random baseline, POS and dependency-depth
summaries over user-supplied annotations, per-word barrier rates, and
cross-run ranking overlap. Lexical translation probabilities come from an
in-repo IBM Model 1 EM estimator; externally produced alignments can be
ingested in Pharaoh "srcIdx-tgtIdx" format instead.
"""

from __future__ import annotations

import csv
import math
from collections import Counter, defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

from .estimators import RiskReport, detect_barriers
from .gateway import ModelHandle
from .metrics import overlap_at_k, rank_positions
from .text_core import AnnotatedCorpus, DataFormatError, Sentence, Vocab

Link = tuple[int, int]  # (source position, target position)


@dataclass(frozen=True)
class AlignmentSet:
    """Word-alignment links for every pair of a parallel corpus."""

    links: tuple[frozenset[Link], ...]

    def __len__(self) -> int:
        return len(self.links)


@dataclass(frozen=True)
class LexTable:
    """Sparse lexical translation table: source id -> target id -> probability."""

    table: Mapping[int, Mapping[int, float]]

    def prob(self, src_id: int, tgt_id: int) -> float:
        return self.table.get(src_id, {}).get(tgt_id, 0.0)

    def validate(self, tol: float = 1e-9) -> None:
        for v, dist in self.table.items():
            total = math.fsum(dist.values())
            if abs(total - 1.0) > tol:
                raise ValueError(f"conditional for source id {v} sums to {total}")


@dataclass(frozen=True)
class GlobalWordStat:
    """Per-word global statistic; a missing word falls back per statistic kind."""

    kind: str  # inv_frequency | entropy | exception
    values: Mapping[int, float]
    unseen_value: float = 0.0

    def value_for(self, token_id: int) -> float:
        return self.values.get(token_id, self.unseen_value)


def ibm1_em(
    pairs: Sequence[tuple[Sentence, Sentence]],
    iterations: int,
) -> tuple[LexTable, list[float]]:
    """IBM Model 1 expectation-maximization over co-occurring token pairs.

    Starts from a uniform table over each source word's co-occurring targets
    (no random initialization), so the result is deterministic. Returns the
    table and the per-iteration corpus log-likelihood, which EM guarantees to
    be non-decreasing.
    """

    if iterations < 1:
        raise ValueError("iterations must be at least 1")
    if not pairs:
        raise ValueError("cannot run EM on an empty corpus")

    cooc: dict[int, set[int]] = defaultdict(set)
    for src, tgt in pairs:
        for v in src.ids:
            cooc[v].update(tgt.ids)
    t: dict[int, dict[int, float]] = {
        v: {w: 1.0 / len(ws) for w in sorted(ws)} for v, ws in cooc.items()
    }

    log_likelihoods = []
    for _ in range(iterations):
        counts: dict[int, dict[int, float]] = defaultdict(lambda: defaultdict(float))
        totals: dict[int, float] = defaultdict(float)
        ll = 0.0
        for src, tgt in pairs:
            for w in tgt.ids:
                denom = math.fsum(t[v].get(w, 0.0) for v in src.ids)
                ll += math.log(denom / len(src))
                for v in src.ids:
                    p = t[v].get(w, 0.0)
                    if p == 0.0:
                        continue
                    share = p / denom
                    counts[v][w] += share
                    totals[v] += share
        log_likelihoods.append(ll)
        for v in counts:
            norm = totals[v]
            t[v] = {w: c / norm for w, c in sorted(counts[v].items())}
    table = LexTable({v: dict(dist) for v, dist in t.items()})
    table.validate()
    return table, log_likelihoods


def viterbi_align(lex: LexTable, pair: tuple[Sentence, Sentence]) -> frozenset[Link]:
    """Greedy alignment: each target position links to its best source position.

    Ties, including the all-zero case for words outside the table, resolve to
    the leftmost source position.
    """

    src, tgt = pair
    links = set()
    for tpos, w in enumerate(tgt.ids):
        best_j = 0
        best_p = -1.0
        for j, v in enumerate(src.ids):
            p = lex.prob(v, w)
            if p > best_p:
                best_p = p
                best_j = j
        links.add((best_j, tpos))
    return frozenset(links)


def align_corpus(lex: LexTable, pairs: Sequence[tuple[Sentence, Sentence]]) -> AlignmentSet:
    return AlignmentSet(tuple(viterbi_align(lex, pair) for pair in pairs))


def translation_entropy(lex: LexTable) -> GlobalWordStat:
    """Natural-log entropy of each source word's translation distribution."""

    values = {}
    for v, dist in lex.table.items():
        values[v] = -math.fsum(p * math.log(p) for p in dist.values() if p > 0.0)
    return GlobalWordStat("entropy", values)


def exception_rate(
    model: ModelHandle,
    corpus: AnnotatedCorpus,
    alignments: AlignmentSet,
    p0: float,
) -> GlobalWordStat:
    """Fraction of each source word's links whose token probability is below p0.

    The probability queried is the model's chance of emitting the aligned
    target word at its position given the source and the target prefix.
    Words with no alignment links get rate 0.
    """

    if len(alignments) != len(corpus.examples):
        raise ValueError("alignments and corpus cover different numbers of pairs")
    exceptions: Counter[int] = Counter()
    totals: Counter[int] = Counter()
    for ex, links in zip(corpus.examples, alignments.links):
        x, y = ex.source, ex.reference
        for spos, tpos in sorted(links):
            v = x[spos]
            totals[v] += 1
            if model.token_prob(x, y, tpos) < p0:
                exceptions[v] += 1
    values = {v: exceptions[v] / totals[v] for v in totals}
    return GlobalWordStat("exception", values)


def inverse_frequency(corpus: AnnotatedCorpus) -> GlobalWordStat:
    """Reciprocal source-side corpus frequency; unseen words rank first."""

    counts: Counter[int] = Counter()
    for ex in corpus.examples:
        counts.update(ex.source.ids)
    if not counts:
        raise ValueError("corpus has no source tokens")
    values = {v: 1.0 / c for v, c in counts.items()}
    return GlobalWordStat("inv_frequency", values, unseen_value=math.inf)


def random_overlap_baseline(length: int, ranked1: int, ranked2: int, k: int) -> float:
    """Expected overlap@k between independent uniformly random rankings.

    Each side's top-k holds min(k, ranked positions) entries; the expected
    intersection of two uniform subsets of sizes t1, t2 inside a sentence of
    n positions is t1*t2/n (hypergeometric mean), divided by k.
    """

    t1 = min(k, ranked1)
    t2 = min(k, ranked2)
    return t1 * t2 / (length * k)


def stat_ranking(stat: GlobalWordStat, x: Sentence):
    """Ranking of a sentence's positions by the global statistic of their tokens."""

    values = [stat.value_for(v) for v in x.ids]
    # rank_positions sorts descending; infinities must lead, which they do.
    return rank_positions(values)


def overlap_vs_global(
    reports: Sequence[RiskReport],
    corpus: AnnotatedCorpus,
    stat: GlobalWordStat,
    k: int,
) -> tuple[float, float]:
    """Mean overlap@k of a global-statistic ranking against the risk ranking.

    Returns (mean overlap, closed-form random baseline averaged over the same
    sentences).
    """

    if len(reports) != len(corpus.examples):
        raise ValueError("reports and corpus cover different numbers of sentences")
    overlaps = []
    baselines = []
    for rep, ex in zip(reports, corpus.examples):
        ranking = stat_ranking(stat, ex.source)
        overlaps.append(overlap_at_k(ranking, rep.ranking, k))
        baselines.append(
            random_overlap_baseline(
                rep.length, len(ranking.positions), len(rep.ranking.positions), k
            )
        )
    return math.fsum(overlaps) / len(overlaps), math.fsum(baselines) / len(baselines)


CONTEXT_AGNOSTIC_THRESHOLD = 0.4
CONTEXT_SENSITIVE_THRESHOLD = 0.05


@dataclass(frozen=True)
class BarrierRateRow:
    token_id: int
    contexts: int
    barrier_count: int
    rate: float
    label: str


def barrier_rate(
    corpus: AnnotatedCorpus,
    detections: Sequence[set[int]],
    min_contexts: int = 10,
) -> list[BarrierRateRow]:
    """Per-word fraction of corpus appearances detected as a barrier.

    Every appearance of a surface token counts as one context; the table is
    filtered to words with more than ``min_contexts`` contexts. Rates at or
    above 0.4 are labeled context-agnostic, at or below 0.05
    context-sensitive.
    """

    if len(detections) != len(corpus.examples):
        raise ValueError("detections and corpus cover different numbers of sentences")
    contexts: Counter[int] = Counter()
    hits: Counter[int] = Counter()
    for ex, detected in zip(corpus.examples, detections):
        for pos, v in enumerate(ex.source.ids):
            contexts[v] += 1
            if pos in detected:
                hits[v] += 1
    rows = []
    for v in sorted(contexts):
        if contexts[v] <= min_contexts:
            continue
        rate = hits[v] / contexts[v]
        if rate >= CONTEXT_AGNOSTIC_THRESHOLD:
            label = "context-agnostic"
        elif rate <= CONTEXT_SENSITIVE_THRESHOLD:
            label = "context-sensitive"
        else:
            label = "intermediate"
        rows.append(BarrierRateRow(v, contexts[v], hits[v], rate, label))
    return rows


def pos_distribution(
    corpus: AnnotatedCorpus,
    detections: Sequence[set[int]],
) -> dict[str, tuple[float, float]]:
    """Per-POS-category share of detected barriers and of all tokens.

    Returns tag -> (barrier fraction, base fraction); each column sums to 1.
    """

    if corpus.pos_tags is None:
        raise DataFormatError("corpus carries no POS annotations")
    if len(detections) != len(corpus.examples):
        raise ValueError("detections and corpus cover different numbers of sentences")
    barrier_counts: Counter[str] = Counter()
    base_counts: Counter[str] = Counter()
    for tags, detected in zip(corpus.pos_tags, detections):
        base_counts.update(tags)
        for pos in detected:
            barrier_counts[tags[pos]] += 1
    total_barriers = sum(barrier_counts.values())
    total_tokens = sum(base_counts.values())
    out = {}
    for tag in sorted(base_counts):
        barrier_frac = barrier_counts[tag] / total_barriers if total_barriers else 0.0
        out[tag] = (barrier_frac, base_counts[tag] / total_tokens)
    return out


def dep_recall(
    corpus: AnnotatedCorpus,
    detections: Sequence[set[int]],
    d: int,
) -> tuple[float, float]:
    """Share of detected barriers within dependency distance d of a leaf.

    Returns (recall over detected barrier words, base fraction over all
    words). Distance 0 is a leaf itself.
    """

    if corpus.dep_depths is None:
        raise DataFormatError("corpus carries no dependency-depth annotations")
    if len(detections) != len(corpus.examples):
        raise ValueError("detections and corpus cover different numbers of sentences")
    barrier_total = 0
    barrier_close = 0
    base_total = 0
    base_close = 0
    for depths, detected in zip(corpus.dep_depths, detections):
        base_total += len(depths)
        base_close += sum(1 for depth in depths if depth <= d)
        for pos in detected:
            barrier_total += 1
            if depths[pos] <= d:
                barrier_close += 1
    recall = barrier_close / barrier_total if barrier_total else 0.0
    base = base_close / base_total if base_total else 0.0
    return recall, base


def cross_run_overlap(
    reports_a: Sequence[RiskReport],
    reports_b: Sequence[RiskReport],
    k: int,
) -> float:
    """Mean overlap@k between two report sets over the same sentences."""

    if len(reports_a) != len(reports_b):
        raise ValueError("report sets have different sizes")
    overlaps = []
    for ra, rb in zip(reports_a, reports_b):
        if ra.example_id != rb.example_id or ra.length != rb.length:
            raise ValueError(
                f"report mismatch: example {ra.example_id}/{rb.example_id}"
            )
        overlaps.append(overlap_at_k(ra.ranking, rb.ranking, k))
    return math.fsum(overlaps) / len(overlaps)


def detections_from_reports(reports: Sequence[RiskReport], k: int) -> list[set[int]]:
    return [detect_barriers(rep, k) for rep in reports]


def read_pharaoh(path: str | Path, n_pairs: int | None = None) -> AlignmentSet:
    """Read alignments in Pharaoh format: per line, space-separated "i-j" links."""

    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            links = set()
            for cell in raw.split():
                try:
                    s, t = cell.split("-")
                    links.add((int(s), int(t)))
                except ValueError as exc:
                    raise DataFormatError(f"{path}:{lineno}: bad link {cell!r}") from exc
            rows.append(frozenset(links))
    if n_pairs is not None and len(rows) != n_pairs:
        raise DataFormatError(f"{path}: {len(rows)} alignment rows for {n_pairs} pairs")
    return AlignmentSet(tuple(rows))


def write_pharaoh(alignments: AlignmentSet, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for links in alignments.links:
            fh.write(" ".join(f"{s}-{t}" for s, t in sorted(links)) + "\n")


def write_lex_table_tsv(
    lex: LexTable,
    src_vocab: Vocab,
    tgt_vocab: Vocab,
    path: str | Path,
) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, delimiter="\t")
        writer.writerow(["src_token", "tgt_token", "prob"])
        for v in sorted(lex.table):
            for w, p in sorted(lex.table[v].items()):
                writer.writerow([src_vocab.tokens[v], tgt_vocab.tokens[w], repr(p)])
