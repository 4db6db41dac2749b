"""Synthetic byte-level corpora with known entropy floors.

Tokens are ints in 0..255. Symbol alphabets occupy bytes 1..alphabet; byte
0 is reserved for the copy-task delimiter.
"""

from __future__ import annotations

import random

from mea_lab.tensor import ContractError

DEFAULT_MARKOV = [
    [0.6, 0.2, 0.1, 0.1],
    [0.1, 0.6, 0.2, 0.1],
    [0.1, 0.1, 0.6, 0.2],
    [0.2, 0.1, 0.1, 0.6],
]

KINDS = ("copy", "repeat_k", "markov")


def make_corpus(kind: str, size: int, seed: int, *, k: int = 2,
                alphabet: int = 16, prefix_len: int = 24,
                transition: list[list[float]] | None = None) -> list[int]:
    """Deterministic synthetic token stream.

    copy:     blocks of [random prefix | 0 | same prefix]; the second half
              of each block is predictable from the first.
    repeat_k: one random k-token motif repeated end to end (k=1 gives a
              constant stream).
    markov:   order-1 chain over a small alphabet with a fixed transition
              matrix (rows sum to 1).
    """
    if size <= 0:
        raise ContractError("corpus size must be positive")
    rng = random.Random(f"{seed}/corpus/{kind}")
    if kind == "copy":
        out: list[int] = []
        while len(out) < size:
            prefix = [rng.randrange(1, alphabet + 1) for _ in range(prefix_len)]
            out.extend(prefix)
            out.append(0)
            out.extend(prefix)
        return out[:size]
    if kind == "repeat_k":
        motif = [rng.randrange(1, alphabet + 1) for _ in range(k)]
        reps = size // k + 1
        return (motif * reps)[:size]
    if kind == "markov":
        matrix = transition if transition is not None else DEFAULT_MARKOV
        m = len(matrix)
        for row in matrix:
            if len(row) != m or abs(sum(row) - 1.0) > 1e-9:
                raise ContractError("transition rows must sum to 1")
        state = rng.randrange(m)
        out = []
        for _ in range(size):
            out.append(state + 1)
            u = rng.random()
            acc = 0.0
            nxt = m - 1
            for j, p in enumerate(matrix[state]):
                acc += p
                if u < acc:
                    nxt = j
                    break
            state = nxt
        return out
    raise ContractError(f"unknown corpus kind {kind!r} (want one of {KINDS})")
