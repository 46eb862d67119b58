"""A deterministic, differentiable toy translation model with planted barriers.

The model translates token-by-token through an identity lexicon, except that
tokens carrying a nonzero interference weight corrupt the decoding of their
neighbors inside a fixed window. Because the embedding rows keep a cosine
margin below 0.9, "correct translation unless interfered" is a construction
guarantee rather than a tendency, which makes exact whole-vocabulary oracles
and planted ground truth possible at desk scale.

Model definition, per output position j of input x:
    interferer k* = argmax over neighbors k != j, |k - j| <= window of iota(x_k)
    mu_j  = iota(x_{k*})                      (0 when the sentence has length 1)
    a_j   = (1 - mu_j) * E[x_j] + mu_j * E[x_{k*}]
    z_j   = tau_inv * a_j @ W.T               (W is a frozen copy of E)
    out_j = argmax z_j                        (ties resolved to the smaller id)

The negative log-likelihood sums per-position cross-entropies over the
overlapping length and charges log(n_vocab) per surplus token on either side.
Freezing W at construction makes the embedding gradient flow only through
input occurrences (emitter or interferer), mirroring how a source-side input
embedding behaves in an encoder-decoder model with a separate output layer.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .text_core import (
    UNK_TOKEN,
    DEL_TOKEN,
    AnnotatedCorpus,
    ParallelExample,
    Sentence,
    Vocab,
)

COSINE_MARGIN = 0.9
MAX_RESAMPLES = 1000


class ToyModelError(RuntimeError):
    """Raised when toy-model construction cannot satisfy its invariants."""


@dataclass(frozen=True)
class ToyParams:
    """Immutable toy-model parameters. Matrices derive deterministically from the seed."""

    seed: int
    n_vocab: int
    dim: int
    E: np.ndarray  # (n_vocab, dim), unit-norm rows, pairwise cosine <= 0.9
    W: np.ndarray  # frozen copy of E taken at construction
    iota: np.ndarray  # (n_vocab,) interference weights in [0, 1]
    window: int
    tau_inv: float
    barrier_ids: tuple[int, ...]
    interference: float


def toy_vocab(n_vocab: int) -> Vocab:
    """Synthetic vocabulary matching the toy model's id space."""

    return Vocab([UNK_TOKEN, DEL_TOKEN] + [f"w{i:03d}" for i in range(2, n_vocab)])


def build_toy_model(
    seed: int,
    n_vocab: int = 50,
    dim: int = 16,
    barrier_set: Sequence[int] = (),
    window: int = 2,
    tau_inv: float = 10.0,
    interference: float = 0.95,
) -> ToyParams:
    """Construct toy parameters, resampling embedding rows until the margin holds.

    Raises ToyModelError when 1000 resamples cannot push every off-diagonal
    cosine below 0.9, which indicates the dimension is too small for the
    vocabulary size.
    """

    if n_vocab < 8:
        raise ValueError("n_vocab must be at least 8")
    if dim < 4:
        raise ValueError("dim must be at least 4")
    if not 0.0 <= interference <= 1.0:
        raise ValueError("interference must lie in [0, 1]")
    barrier_ids = tuple(sorted(set(barrier_set)))
    for b in barrier_ids:
        if not 2 <= b < n_vocab:
            raise ValueError(f"barrier id {b} must be a non-reserved id below {n_vocab}")

    rng = np.random.default_rng(seed)
    E = rng.standard_normal((n_vocab, dim))
    E /= np.linalg.norm(E, axis=1, keepdims=True)
    resamples = 0
    while True:
        gram = E @ E.T
        np.fill_diagonal(gram, -np.inf)
        worst = int(np.argmax(gram.max(axis=1)))
        if gram[worst].max() <= COSINE_MARGIN:
            break
        resamples += 1
        if resamples > MAX_RESAMPLES:
            raise ToyModelError(
                f"could not reach cosine margin {COSINE_MARGIN} after {MAX_RESAMPLES} "
                f"resamples; dim={dim} is too small for n_vocab={n_vocab}"
            )
        row = rng.standard_normal(dim)
        E[worst] = row / np.linalg.norm(row)

    iota = np.zeros(n_vocab)
    if barrier_ids:
        iota[list(barrier_ids)] = interference
    E.setflags(write=False)
    W = E.copy()
    W.setflags(write=False)
    iota.setflags(write=False)
    return ToyParams(
        seed=seed,
        n_vocab=n_vocab,
        dim=dim,
        E=E,
        W=W,
        iota=iota,
        window=window,
        tau_inv=tau_inv,
        barrier_ids=barrier_ids,
        interference=interference,
    )


def save_toy_params(p: ToyParams, path: str | Path) -> None:
    """Persist the seed and hyperparameters; matrices are regenerated on load."""

    payload = {
        "seed": p.seed,
        "n_vocab": p.n_vocab,
        "dim": p.dim,
        "barrier_ids": list(p.barrier_ids),
        "window": p.window,
        "tau_inv": p.tau_inv,
        "interference": p.interference,
    }
    Path(path).write_text(json.dumps(payload, sort_keys=True) + "\n", encoding="utf-8")


def load_toy_params(path: str | Path) -> ToyParams:
    payload = json.loads(Path(path).read_text(encoding="utf-8"))
    return build_toy_model(
        seed=payload["seed"],
        n_vocab=payload["n_vocab"],
        dim=payload["dim"],
        barrier_set=payload["barrier_ids"],
        window=payload["window"],
        tau_inv=payload["tau_inv"],
        interference=payload["interference"],
    )


def _validate_ids(p: ToyParams, s: Sentence) -> None:
    for i in s.ids:
        if i >= p.n_vocab:
            raise ValueError(f"token id {i} outside model vocabulary of size {p.n_vocab}")


def _interferers(p: ToyParams, ids: tuple[int, ...]) -> tuple[np.ndarray, np.ndarray]:
    """Per-position mixing weight mu and interferer position (own index if none)."""

    m = len(ids)
    iota_x = p.iota[list(ids)]
    mu = np.zeros(m)
    k_star = np.arange(m)
    for j in range(m):
        lo = max(0, j - p.window)
        hi = min(m - 1, j + p.window)
        best_k = -1
        best_iota = -1.0
        for k in range(lo, hi + 1):
            if k == j:
                continue
            if iota_x[k] > best_iota:  # strict: ties keep the smaller k
                best_iota = iota_x[k]
                best_k = k
        if best_k >= 0:
            mu[j] = iota_x[best_k]
            k_star[j] = best_k
    return mu, k_star


def _logits(p: ToyParams, ids: tuple[int, ...]) -> np.ndarray:
    mu, k_star = _interferers(p, ids)
    idx = np.fromiter(ids, dtype=np.intp, count=len(ids))
    mix = (1.0 - mu)[:, None] * p.E[idx] + mu[:, None] * p.E[idx[k_star]]
    return p.tau_inv * (mix @ p.W.T)


def toy_decode(p: ToyParams, x: Sentence) -> Sentence:
    """Argmax decoding; output length always equals input length."""

    _validate_ids(p, x)
    z = _logits(p, x.ids)
    return Sentence(tuple(int(v) for v in np.argmax(z, axis=1)))


def _log_softmax(z: np.ndarray) -> np.ndarray:
    zmax = z.max(axis=1, keepdims=True)
    return z - zmax - np.log(np.exp(z - zmax).sum(axis=1, keepdims=True))


def toy_nll(p: ToyParams, x: Sentence, y: Sentence) -> float:
    """Cross-entropy over the overlapping length plus a per-token length penalty."""

    _validate_ids(p, x)
    _validate_ids(p, y)
    overlap = min(len(x), len(y))
    z = _logits(p, x.ids)[:overlap]
    logp = _log_softmax(z)
    token_nll = -logp[np.arange(overlap), list(y.ids[:overlap])].sum()
    penalty = abs(len(x) - len(y)) * np.log(p.n_vocab)
    return float(token_nll + penalty)


def toy_embed_grad(p: ToyParams, x: Sentence, y: Sentence, i: int) -> np.ndarray:
    """Analytic gradient of toy_nll with respect to the embedding row of x_i.

    The row E[x_i] enters the loss wherever its token acts as the emitter or
    as the chosen interferer of a position; W is a frozen copy, so no gradient
    flows through the output product. The length penalty has no E dependence.
    """

    if not 0 <= i < len(x):
        raise IndexError(f"position {i} out of range")
    _validate_ids(p, x)
    _validate_ids(p, y)
    r = x[i]
    overlap = min(len(x), len(y))
    mu, k_star = _interferers(p, x.ids)
    idx = np.fromiter(x.ids, dtype=np.intp, count=len(x))
    mix = (1.0 - mu)[:, None] * p.E[idx] + mu[:, None] * p.E[idx[k_star]]
    z = p.tau_inv * (mix @ p.W.T)[:overlap]
    probs = np.exp(_log_softmax(z))
    g = probs.copy()
    g[np.arange(overlap), list(y.ids[:overlap])] -= 1.0

    grad = np.zeros(p.dim)
    for j in range(overlap):
        coeff = 0.0
        if x[j] == r:
            coeff += 1.0 - mu[j]
        if mu[j] > 0.0 and x[k_star[j]] == r:
            coeff += mu[j]
        if coeff != 0.0:
            grad += coeff * (p.W.T @ g[j])
    return p.tau_inv * grad


def toy_proposal(p: ToyParams, x: Sentence, y: Sentence, i: int) -> np.ndarray:
    """Substitution proposal from a one-step embedding update with learning rate 1.

    Moves E[x_i] one gradient step down the loss of the original pair, then
    scores every vocabulary embedding by dot product and normalizes with a
    softmax. The result is a probability vector over the whole vocabulary.
    """

    updated = p.E[x[i]] - toy_embed_grad(p, x, y, i)
    scores = p.E @ updated
    scores -= scores.max()
    w = np.exp(scores)
    return w / w.sum()


def toy_nbest(p: ToyParams, x: Sentence, k: int) -> list[Sentence]:
    """Exact k-best outputs under the sum of per-position logits.

    Positions are independent given x, so the search is a best-first walk of
    the per-position score lattice. Returned hypotheses are distinct, ordered
    by non-increasing total score with deterministic tie handling.
    """

    if k < 1:
        raise ValueError("k must be at least 1")
    _validate_ids(p, x)
    import heapq

    z = _logits(p, x.ids)
    m = len(x)
    # Per position: token ids ordered by score descending, id ascending.
    order = [sorted(range(p.n_vocab), key=lambda v, j=j: (-z[j, v], v)) for j in range(m)]
    sorted_scores = [np.array([z[j, v] for v in order[j]]) for j in range(m)]

    def ids_of(choice: tuple[int, ...]) -> tuple[int, ...]:
        return tuple(order[j][c] for j, c in enumerate(choice))

    # Exact score ties resolve lexicographically by output token ids.
    first = (0,) * m
    best = -sum(float(sorted_scores[j][0]) for j in range(m))
    heap: list[tuple[float, tuple[int, ...], tuple[int, ...]]] = [(best, ids_of(first), first)]
    seen = {first}
    out: list[Sentence] = []
    while heap and len(out) < k:
        neg_score, ids, choice = heapq.heappop(heap)
        out.append(Sentence(ids))
        for j in range(m):
            if choice[j] + 1 >= p.n_vocab:
                continue
            nxt = choice[:j] + (choice[j] + 1,) + choice[j + 1 :]
            if nxt in seen:
                continue
            seen.add(nxt)
            delta = float(sorted_scores[j][choice[j] + 1] - sorted_scores[j][choice[j]])
            heapq.heappush(heap, (neg_score - delta, ids_of(nxt), nxt))
    return out


def toy_token_prob(p: ToyParams, x: Sentence, y: Sentence, t: int) -> float:
    """Exact probability of emitting y_t at position t given x.

    Positions past the input length have no emission distribution and fall
    back to the uniform 1/n_vocab used by the length penalty.
    """

    if not 0 <= t < len(y):
        raise IndexError(f"target position {t} out of range")
    if t >= len(x):
        return 1.0 / p.n_vocab
    z = _logits(p, x.ids)[t : t + 1]
    return float(np.exp(_log_softmax(z))[0, y[t]])


@dataclass(frozen=True)
class SynthCorpusSpec:
    """Recipe for a deterministic synthetic parallel corpus.

    References are the identity-lexicon image of the source as generated, so
    a barrier-free sentence decodes to its reference exactly. When
    ``single_barrier`` is set every sentence carries exactly one barrier
    token at a random position; otherwise each position independently draws a
    barrier token with probability ``barrier_prob``.
    """

    n_sentences: int
    seed: int
    min_len: int = 8
    max_len: int = 14
    barrier_prob: float = 0.2
    single_barrier: bool = False

    def __post_init__(self) -> None:
        if self.n_sentences < 1:
            raise ValueError("n_sentences must be positive")
        if not 1 <= self.min_len <= self.max_len:
            raise ValueError("invalid length range")
        if not 0.0 <= self.barrier_prob <= 1.0:
            raise ValueError("barrier_prob must lie in [0, 1]")


def gen_synth_corpus(spec: SynthCorpusSpec, p: ToyParams) -> AnnotatedCorpus:
    """Sample a corpus from the spec; deterministic in the spec seed.

    POS tags mark planted barrier tokens "B" and everything else "O", and the
    planted positions are also retained as ``barrier_truth``.
    """

    rng = np.random.default_rng(spec.seed)
    regular = [v for v in range(2, p.n_vocab) if v not in set(p.barrier_ids)]
    if not regular:
        raise ToyModelError("toy vocabulary has no non-barrier tokens to sample")
    examples = []
    tags = []
    truth = []
    for _ in range(spec.n_sentences):
        length = int(rng.integers(spec.min_len, spec.max_len + 1))
        ids = [int(regular[j]) for j in rng.integers(0, len(regular), size=length)]
        positions: list[int] = []
        if spec.single_barrier:
            if p.barrier_ids:
                pos = int(rng.integers(0, length))
                ids[pos] = int(p.barrier_ids[int(rng.integers(0, len(p.barrier_ids)))])
                positions = [pos]
        elif p.barrier_ids and spec.barrier_prob > 0.0:
            draws = rng.random(length)
            choices = rng.integers(0, len(p.barrier_ids), size=length)
            for j in range(length):
                if draws[j] < spec.barrier_prob:
                    ids[j] = int(p.barrier_ids[int(choices[j])])
                    positions.append(j)
        src = Sentence(tuple(ids))
        examples.append(ParallelExample(src, (Sentence(tuple(ids)),)))
        tags.append(tuple("B" if j in set(positions) else "O" for j in range(length)))
        truth.append(frozenset(positions))
    return AnnotatedCorpus(
        tuple(examples),
        pos_tags=tuple(tags),
        barrier_truth=tuple(truth),
    )
