"""Vocabulary, tokenized sentences, parallel examples and the one-word edit space.

Everything in this module is immutable after construction and safe to share
across threads. Token ids are dense integers in [0, vocab size); two ids are
reserved for the unknown-word token and the deletion marker. The deletion
marker owns an id so files and proposal vectors can refer to it, but it never
appears inside a sentence.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

UNK_TOKEN = "<unk>"
DEL_TOKEN = "<del>"


class DataFormatError(ValueError):
    """Raised when corpus or annotation files violate the expected layout."""


@dataclass(frozen=True, slots=True)
class Sentence:
    """A non-empty sequence of token ids."""

    ids: tuple[int, ...]

    def __post_init__(self) -> None:
        if len(self.ids) == 0:
            raise ValueError("sentence must contain at least one token")
        if any(i < 0 for i in self.ids):
            raise ValueError("token ids must be non-negative")

    def __len__(self) -> int:
        return len(self.ids)

    def __iter__(self):
        return iter(self.ids)

    def __getitem__(self, i: int) -> int:
        return self.ids[i]


def sentence(*ids: int) -> Sentence:
    """Shorthand constructor used heavily in tests."""

    return Sentence(tuple(ids))


class Vocab:
    """Bijective token<->id map with reserved unknown and deletion-marker ids.

    Ids are positions in ``tokens``. The unknown token is a real vocabulary
    entry (out-of-vocabulary words encode to it); the deletion marker is
    reserved and rejected inside sentences.
    """

    def __init__(self, tokens: Sequence[str]):
        if len(tokens) != len(set(tokens)):
            raise ValueError("vocabulary tokens must be unique")
        if UNK_TOKEN not in tokens or DEL_TOKEN not in tokens:
            raise ValueError(f"vocabulary must reserve {UNK_TOKEN!r} and {DEL_TOKEN!r}")
        self.tokens: tuple[str, ...] = tuple(tokens)
        self.index: dict[str, int] = {t: i for i, t in enumerate(self.tokens)}
        self.unk_id: int = self.index[UNK_TOKEN]
        self.del_id: int = self.index[DEL_TOKEN]
        self.specials: frozenset[int] = frozenset((self.unk_id, self.del_id))

    def __len__(self) -> int:
        return len(self.tokens)

    def __eq__(self, other: object) -> bool:
        return isinstance(other, Vocab) and self.tokens == other.tokens

    def __hash__(self) -> int:
        return hash(self.tokens)

    def encode(self, words: Sequence[str]) -> Sentence:
        """Map token strings to a Sentence, falling back to the unknown id."""

        ids = []
        for w in words:
            if w == DEL_TOKEN:
                raise DataFormatError(f"{DEL_TOKEN!r} may not appear in a sentence")
            ids.append(self.index.get(w, self.unk_id))
        return Sentence(tuple(ids))

    def decode(self, s: Sentence) -> list[str]:
        for i in s.ids:
            if i >= len(self.tokens):
                raise ValueError(f"token id {i} outside vocabulary of size {len(self.tokens)}")
        return [self.tokens[i] for i in s.ids]


def build_vocab(corpus: Iterable[Sequence[str]], max_size: int) -> Vocab:
    """Build a frequency-ordered vocabulary from tokenized lines.

    Tokens are ordered by descending frequency, ties broken lexicographically,
    and the list is truncated to ``max_size`` entries including the two
    reserved tokens.
    """

    counts: Counter[str] = Counter()
    n_lines = 0
    for line in corpus:
        n_lines += 1
        counts.update(t for t in line if t not in (UNK_TOKEN, DEL_TOKEN))
    if n_lines == 0:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    if max_size < 2:
        raise ValueError("max_size must leave room for the reserved tokens")
    ordered = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    keep = [tok for tok, _ in ordered[: max_size - 2]]
    return Vocab([UNK_TOKEN, DEL_TOKEN] + keep)


@dataclass(frozen=True, slots=True)
class Edit:
    """A single-position counterfactual edit: substitution or deletion.

    ``token is None`` means deletion; otherwise the id substituted in at
    ``position``.
    """

    position: int
    token: int | None = None

    @property
    def is_delete(self) -> bool:
        return self.token is None

    def sort_key(self) -> tuple[int, int]:
        # Canonical evaluation order: ascending token id, deletion last.
        return (1, 0) if self.token is None else (0, self.token)


def edit_set(vocab: Vocab, x: Sentence, i: int) -> list[Edit]:
    """All d=1 edits of ``x`` at position ``i``.

    Substitutions range over the vocabulary minus the reserved ids and minus
    the original token (the identity edit carries no counterfactual
    information). One deletion is appended unless the sentence has length 1,
    whose deletion would leave an undecodable empty source. Order is
    deterministic: ascending substitute id, deletion last.
    """

    if not 0 <= i < len(x):
        raise IndexError(f"position {i} out of range for sentence of length {len(x)}")
    excluded = set(vocab.specials)
    excluded.add(x[i])
    edits = [Edit(i, v) for v in range(len(vocab)) if v not in excluded]
    if len(x) > 1:
        edits.append(Edit(i, None))
    return edits


def apply_edit(x: Sentence, e: Edit) -> Sentence:
    """Apply a substitution or deletion, preserving every other position."""

    if not 0 <= e.position < len(x):
        raise IndexError(f"edit position {e.position} out of range")
    if e.is_delete:
        if len(x) == 1:
            raise ValueError("cannot delete the only token of a sentence")
        return Sentence(x.ids[: e.position] + x.ids[e.position + 1 :])
    if e.token == x[e.position]:
        raise ValueError("identity substitution is not a valid edit")
    return Sentence(x.ids[: e.position] + (e.token,) + x.ids[e.position + 1 :])


@dataclass(frozen=True, slots=True)
class ParallelExample:
    """A source sentence with one or more reference translations."""

    source: Sentence
    references: tuple[Sentence, ...]
    primary_ref: int = 0

    def __post_init__(self) -> None:
        if not self.references:
            raise ValueError("at least one reference is required")
        if not 0 <= self.primary_ref < len(self.references):
            raise ValueError("primary_ref out of range")

    @property
    def reference(self) -> Sentence:
        return self.references[self.primary_ref]


@dataclass(frozen=True)
class AnnotatedCorpus:
    """Parallel examples plus optional token-aligned annotations.

    ``pos_tags`` and ``dep_depths`` are per-example, per-source-token when
    present. ``barrier_truth`` records planted barrier positions for
    synthetic corpora and is absent for real data.
    """

    examples: tuple[ParallelExample, ...]
    pos_tags: tuple[tuple[str, ...], ...] | None = None
    dep_depths: tuple[tuple[int, ...], ...] | None = None
    barrier_truth: tuple[frozenset[int], ...] | None = field(default=None, compare=False)

    def __post_init__(self) -> None:
        for name, ann in (("pos_tags", self.pos_tags), ("dep_depths", self.dep_depths)):
            if ann is None:
                continue
            if len(ann) != len(self.examples):
                raise DataFormatError(f"{name} has {len(ann)} rows for {len(self.examples)} examples")
            for row, ex in zip(ann, self.examples):
                if len(row) != len(ex.source):
                    raise DataFormatError(
                        f"{name} row length {len(row)} does not match source length {len(ex.source)}"
                    )
        if self.dep_depths is not None:
            for row in self.dep_depths:
                if any(d < 0 for d in row):
                    raise DataFormatError("dependency depths must be non-negative")

    def __len__(self) -> int:
        return len(self.examples)


def read_token_lines(path: str | Path) -> list[list[str]]:
    """Read a pre-tokenized text file: one sentence per line, space-separated."""

    lines = []
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            toks = raw.split()
            if not toks:
                raise DataFormatError(f"{path}:{lineno}: empty sentence")
            lines.append(toks)
    if not lines:
        raise DataFormatError(f"{path}: file contains no sentences")
    return lines


def read_parallel_corpus(
    vocab: Vocab,
    src_path: str | Path,
    ref_paths: Sequence[str | Path],
    pos_path: str | Path | None = None,
    dep_path: str | Path | None = None,
) -> AnnotatedCorpus:
    """Load paired corpus files (and optional annotation TSVs) into one corpus."""

    src_lines = read_token_lines(src_path)
    ref_sides = [read_token_lines(p) for p in ref_paths]
    if not ref_sides:
        raise DataFormatError("at least one reference file is required")
    for p, side in zip(ref_paths, ref_sides):
        if len(side) != len(src_lines):
            raise DataFormatError(f"{p}: {len(side)} sentences but source has {len(src_lines)}")
    examples = []
    for i, src in enumerate(src_lines):
        refs = tuple(vocab.encode(side[i]) for side in ref_sides)
        examples.append(ParallelExample(vocab.encode(src), refs))
    pos = _read_annotation(pos_path, str) if pos_path else None
    dep = _read_annotation(dep_path, int) if dep_path else None
    return AnnotatedCorpus(tuple(examples), pos_tags=pos, dep_depths=dep)


def _read_annotation(path, cast):
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            cells = raw.rstrip("\n").split("\t")
            if cells == [""]:
                raise DataFormatError(f"{path}:{lineno}: empty annotation row")
            try:
                rows.append(tuple(cast(c) for c in cells))
            except ValueError as exc:
                raise DataFormatError(f"{path}:{lineno}: {exc}") from exc
    return tuple(rows)


def write_corpus(
    corpus: AnnotatedCorpus,
    vocab: Vocab,
    src_path: str | Path,
    ref_path: str | Path,
    pos_path: str | Path | None = None,
) -> None:
    """Write a corpus back to plain-text files (primary reference only)."""

    with open(src_path, "w", encoding="utf-8") as fh:
        for ex in corpus.examples:
            fh.write(" ".join(vocab.decode(ex.source)) + "\n")
    with open(ref_path, "w", encoding="utf-8") as fh:
        for ex in corpus.examples:
            fh.write(" ".join(vocab.decode(ex.reference)) + "\n")
    if pos_path is not None:
        if corpus.pos_tags is None:
            raise ValueError("corpus has no POS annotations to write")
        with open(pos_path, "w", encoding="utf-8") as fh:
            for row in corpus.pos_tags:
                fh.write("\t".join(row) + "\n")
