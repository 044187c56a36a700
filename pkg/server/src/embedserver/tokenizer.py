"""Shared tokenizer: whitespace words split into four-character pieces.

Every model in the registry uses this rule, and the client side budgets
against the same arithmetic: a word of length L costs ceil(L / 4) tokens,
whitespace costs nothing.
"""
from __future__ import annotations

PIECE_CHARS = 4


def word_pieces(word: str) -> list[str]:
    return [word[i : i + PIECE_CHARS] for i in range(0, len(word), PIECE_CHARS)]


def tokenize(text: str) -> list[str]:
    pieces: list[str] = []
    for word in text.split():
        pieces.extend(word_pieces(word))
    return pieces


def count_tokens(text: str) -> int:
    return len(tokenize(text))


def truncate(pieces: list[str], max_tokens: int) -> list[str]:
    # the prefix rule: everything past the budget is invisible to the model
    return pieces[:max_tokens]
