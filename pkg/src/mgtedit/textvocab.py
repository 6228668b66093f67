"""Closed instruction vocabulary for the toy editing task.

Instructions are short templated strings ("recolor block to red") tokenized
by whitespace against a fixed word list. Keeping the vocabulary closed makes
text encoding a total, deterministic function with no learned preprocessing.
"""

from __future__ import annotations

from .tokenizer import NAMED_COLORS

QUADRANTS = ("q1", "q2", "q3", "q4")

WORDS: tuple[str, ...] = (
    "recolor",
    "remove",
    "add",
    "block",
    "to",
    "at",
    *NAMED_COLORS.keys(),
    *QUADRANTS,
)

WORD_IDS: dict[str, int] = {w: i for i, w in enumerate(WORDS)}

VOCAB_SIZE = len(WORDS)


def encode_text(text: str) -> list[int]:
    """Whitespace-tokenize an instruction into word ids."""
    ids = []
    for word in text.split():
        w = word.lower()
        if w not in WORD_IDS:
            raise ValueError(f"unknown instruction word: {word!r}")
        ids.append(WORD_IDS[w])
    if not ids:
        raise ValueError("empty instruction")
    return ids


def decode_text(ids: list[int]) -> str:
    words = []
    for t in ids:
        if not 0 <= t < VOCAB_SIZE:
            raise ValueError(f"instruction token id out of range: {t}")
        words.append(WORDS[t])
    return " ".join(words)
