"""Deterministic hash-based forward passes.

Embedding runs a causal hash chain over the truncated token pieces: the
state after piece i digests the model seed (model id + instruction) and
every piece up to i, so any change inside the token window perturbs all
later states, while text past the window cannot matter. Pooling then reads
the chain per ModelEntry: last_token takes the final state; the mean mode
averages the per-piece states of the text only (the instruction shapes the
states but contributes no pooled positions of its own).

Scoring maps (prompt context, token) pairs to pseudo probability mass.
The weight function never sees the model id, so two decoders that differ
only in their variant sets draw the same per-token mass for the same
prompt; summing over a superset of yes-variants can then only raise p_yes
(with extra mass e and base total T >= yes mass a: (a+e)/(T+e) >= a/T).
A residual bucket above 1 keeps p_yes + p_no strictly below 1.
"""
from __future__ import annotations

import hashlib
import math

from .registry import ModelEntry
from .tokenizer import tokenize, truncate

_STATE_BYTES = 16


def _seed_state(model_id: str, instruction: str) -> bytes:
    return hashlib.blake2b(f"{model_id}\x1e{instruction}".encode(),
                           digest_size=_STATE_BYTES).digest()


def _advance(state: bytes, piece: str) -> bytes:
    return hashlib.blake2b(state + piece.encode(), digest_size=_STATE_BYTES).digest()


def _expand(state: bytes, dim: int) -> list[float]:
    # counter-mode expansion of one chain state into dim floats in [-1, 1)
    out: list[float] = []
    counter = 0
    while len(out) < dim:
        block = hashlib.blake2b(state + counter.to_bytes(4, "little"),
                                digest_size=64).digest()
        for j in range(0, len(block) - 3, 4):
            if len(out) >= dim:
                break
            word = int.from_bytes(block[j : j + 4], "little")
            out.append(word / 2**31 - 1.0)
        counter += 1
    return out


def _normalize(vec: list[float]) -> list[float]:
    norm = math.sqrt(sum(v * v for v in vec))
    if norm == 0.0:
        return [1.0] + [0.0] * (len(vec) - 1)
    return [v / norm for v in vec]


def embed(entry: ModelEntry, instruction: str, text: str) -> list[float]:
    pieces = truncate(tokenize(text), entry.max_tokens)
    state = _seed_state(entry.model_id, instruction)
    states = []
    for piece in pieces:
        state = _advance(state, piece)
        states.append(state)
    if entry.pooling == "last_token":
        # empty text embeds the instruction-only state
        final = states[-1] if states else _seed_state(entry.model_id, instruction)
        return _normalize(_expand(final, entry.dim))
    if not states:
        return _normalize(_expand(_seed_state(entry.model_id, instruction), entry.dim))
    hidden = [_expand(s, entry.dim) for s in states]
    mean = [sum(col) / len(hidden) for col in zip(*hidden)]
    return _normalize(mean)


def _token_mass(context: str, token: str) -> float:
    digest = hashlib.blake2b(f"{context}\x1f{token}".encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little") / 2**64


def score(entry: ModelEntry, prompt: str) -> tuple[float, float]:
    context = "\x1f".join(truncate(tokenize(prompt), entry.max_tokens))
    masses = {tok: _token_mass(context, tok)
              for tok in (*entry.yes_variants, *entry.no_variants)}
    residual = 1.0 + _token_mass(context, "\x00residual")
    total = sum(masses.values()) + residual
    p_yes = sum(masses[t] for t in entry.yes_variants) / total
    p_no = sum(masses[t] for t in entry.no_variants) / total
    return p_yes, p_no
