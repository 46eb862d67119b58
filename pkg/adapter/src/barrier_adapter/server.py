"""Reference model server speaking the barrier-probe stdio wire protocol.

One JSON object per line on stdin, one response per request on stdout with a
matching id. The session starts with a hello exchange that advertises the
vocabulary, the model identity and the capability set; afterwards decode,
nll and nbest are served until EOF. Unknown or unsupported ops produce an
error response and keep the connection alive; a malformed line is answered
with id -1.

The built-in model is a mock lexical translator meant for protocol
conformance testing and as a template for wrapping real checkpoints:

  * decode     per-token dictionary lookup (a fixed rotation of the
               vocabulary), argmax of the lexical table, deterministic
  * nll        sum of per-token negative log probabilities under a smoothed
               lexical table; positions beyond the source length fall back
               to a uniform floor, so the nll of a prefix is a pure running
               sum and prefix differences recover exact token probabilities
  * nbest      exact top-k of the per-position product distribution via
               best-first lattice search

The mock deliberately has no gradients, so it does not advertise the
proposal capability; clients requesting gradient-guided sampling must fall
back. To wrap a real autodiff-backed model, subclass or replace MockLexModel
and implement ``proposal(src, ref, pos)`` returning a probability vector
over the vocabulary (one-step input-embedding update scored against all
embeddings and softmax-normalized), then add "proposal" to CAPABILITIES.
"""

from __future__ import annotations

import argparse
import heapq
import json
import math
import sys
from typing import Iterable, TextIO

MAIN_PROB = 0.7
ALT_PROB = 0.2
FLOOR_MASS = 0.1  # spread uniformly over the whole vocabulary

CAPABILITIES = ["decode", "nll", "nbest"]


class MockLexModel:
    """Deterministic dictionary-lookup translator over a synthetic vocabulary."""

    def __init__(self, vocab_size: int = 50):
        if vocab_size < 4:
            raise ValueError("vocab_size must be at least 4")
        self.vocab = ["<unk>", "<del>"] + [f"m{i:03d}" for i in range(2, vocab_size)]
        self.n = vocab_size
        self.model_id = f"mock-lex-v1-n{vocab_size}"

    def _rotate(self, v: int, offset: int) -> int:
        if v < 2:
            return v
        return 2 + (v - 2 + offset) % (self.n - 2)

    def lex_prob(self, tgt: int, src: int) -> float:
        """Smoothed lexical table phi(tgt | src); each conditional sums to 1."""

        p = FLOOR_MASS / self.n
        main = self._rotate(src, 1)
        alt = self._rotate(src, 2)
        if main == alt:  # reserved ids do not rotate; merge both masses
            if tgt == main:
                p += MAIN_PROB + ALT_PROB
        elif tgt == main:
            p += MAIN_PROB
        elif tgt == alt:
            p += ALT_PROB
        return p

    def token_prob(self, src_ids: list[int], tgt: int, pos: int) -> float:
        if pos < len(src_ids):
            return self.lex_prob(tgt, src_ids[pos])
        return 1.0 / self.n

    def decode(self, src_ids: list[int]) -> list[int]:
        return [self._rotate(v, 1) for v in src_ids]

    def nll(self, src_ids: list[int], ref_ids: list[int]) -> float:
        return -sum(
            math.log(self.token_prob(src_ids, w, t)) for t, w in enumerate(ref_ids)
        )

    def nbest(self, src_ids: list[int], k: int) -> list[list[int]]:
        m = len(src_ids)
        order = []
        scores = []
        for j in range(m):
            ranked = sorted(
                range(self.n),
                key=lambda v, j=j: (-self.lex_prob(v, src_ids[j]), v),
            )
            order.append(ranked)
            scores.append([math.log(self.lex_prob(v, src_ids[j])) for v in ranked])
        def ids_of(choice: tuple[int, ...]) -> tuple[int, ...]:
            return tuple(order[j][c] for j, c in enumerate(choice))

        # Ties in total score resolve lexicographically by output token ids.
        first = (0,) * m
        heap = [(-sum(scores[j][0] for j in range(m)), ids_of(first), first)]
        seen = {first}
        out: list[list[int]] = []
        while heap and len(out) < k:
            neg, ids, choice = heapq.heappop(heap)
            out.append(list(ids))
            for j in range(m):
                if choice[j] + 1 >= self.n:
                    continue
                nxt = choice[:j] + (choice[j] + 1,) + choice[j + 1 :]
                if nxt in seen:
                    continue
                seen.add(nxt)
                delta = scores[j][choice[j] + 1] - scores[j][choice[j]]
                heapq.heappush(heap, (neg - delta, ids_of(nxt), nxt))
        return out


def _dump(body: dict) -> str:
    return json.dumps(body, sort_keys=True, separators=(",", ":"))


def _error(ident: int, message: str) -> dict:
    return {"id": ident, "error": message}


class Server:
    """Single-threaded request loop; max one request in flight."""

    def __init__(self, model: MockLexModel):
        self.model = model
        self.hello_seen = False

    def _check_ids(self, ids: Iterable[int]) -> None:
        for v in ids:
            if not isinstance(v, int) or not 0 <= v < self.model.n:
                raise ValueError(f"token id {v!r} outside vocabulary of size {self.model.n}")

    def handle(self, req: dict) -> dict:
        ident = req.get("id")
        if not isinstance(ident, int):
            return _error(-1, "request id must be an integer")
        op = req.get("op")
        if op == "hello":
            self.hello_seen = True
            return {
                "id": ident,
                "vocab": self.model.vocab,
                "model_id": self.model.model_id,
                "capabilities": CAPABILITIES,
                "max_inflight": 1,
            }
        if not self.hello_seen:
            return _error(ident, "hello must be the first request")
        try:
            if op == "decode":
                src = list(req["src"])
                self._check_ids(src)
                if not src:
                    return _error(ident, "source must be non-empty")
                return {"id": ident, "hyp": self.model.decode(src)}
            if op == "nll":
                src, ref = list(req["src"]), list(req["ref"])
                self._check_ids(src)
                self._check_ids(ref)
                if not src or not ref:
                    return _error(ident, "source and reference must be non-empty")
                return {"id": ident, "nll": self.model.nll(src, ref)}
            if op == "nbest":
                src, k = list(req["src"]), int(req["k"])
                self._check_ids(src)
                if not src:
                    return _error(ident, "source must be non-empty")
                if k < 1:
                    return _error(ident, "k must be at least 1")
                return {"id": ident, "hyps": self.model.nbest(src, k)}
            if op == "proposal":
                return _error(ident, "proposal is not supported by the mock model")
            return _error(ident, f"unknown op {op!r}")
        except (KeyError, TypeError, ValueError) as exc:
            return _error(ident, f"bad request: {exc}")

    def serve(self, stdin: TextIO, stdout: TextIO) -> None:
        for line in stdin:
            if not line.strip():
                continue
            try:
                req = json.loads(line)
                if not isinstance(req, dict):
                    raise ValueError("request must be a JSON object")
            except (json.JSONDecodeError, ValueError) as exc:
                stdout.write(_dump(_error(-1, f"malformed request: {exc}")) + "\n")
                stdout.flush()
                continue
            stdout.write(_dump(self.handle(req)) + "\n")
            stdout.flush()


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(description="barrier-probe reference model server")
    parser.add_argument("--vocab-size", type=int, default=50)
    args = parser.parse_args(argv)
    server = Server(MockLexModel(args.vocab_size))
    server.serve(sys.stdin, sys.stdout)
    return 0


if __name__ == "__main__":
    sys.exit(main())
