"""Deterministic synthetic byte corpora for training and calibration.

Two flavors: a seeded word-bigram generator that produces English-shaped
text (learnable structure, punctuation and newlines for marker-token
analysis), and plain repetition of a fixed sentence for memorization
fixtures.
"""

from __future__ import annotations

import numpy as np

_WORDS = [
    "the", "a", "of", "and", "to", "in", "stone", "river", "light", "dark",
    "tower", "road", "wind", "rain", "fire", "came", "went", "stood", "fell",
    "rose", "old", "small", "long", "grey", "quiet", "under", "over", "near",
    "far", "again", "then", "night", "morning", "door", "field", "voice",
]


def make_corpus(seed: int, n_bytes: int) -> bytes:
    """Markov word soup with sentences and paragraphs; pure function of args."""
    rng = np.random.default_rng(seed)
    n_words = len(_WORDS)
    # Sparse, peaked bigram table so the text has learnable regularities.
    logits = rng.normal(0.0, 2.0, size=(n_words, n_words))
    table = np.exp(logits - logits.max(axis=1, keepdims=True))
    table /= table.sum(axis=1, keepdims=True)

    parts: list[str] = []
    total = 0
    word = int(rng.integers(n_words))
    words_in_sentence = 0
    while total < n_bytes:
        token = _WORDS[word]
        words_in_sentence += 1
        if words_in_sentence >= int(rng.integers(6, 14)):
            token += "." if rng.random() < 0.8 else ",\n"
            words_in_sentence = 0
            if rng.random() < 0.15:
                token += "\n"
            else:
                token += " "
        else:
            token += ", " if rng.random() < 0.06 else " "
        parts.append(token)
        total += len(token)
        word = int(rng.choice(n_words, p=table[word]))
    return "".join(parts).encode("ascii")[:n_bytes]


def make_repetitive_corpus(n_bytes: int, sentence: str = "the grey tower stood under the rain. ") -> bytes:
    reps = n_bytes // len(sentence) + 1
    return (sentence * reps).encode("ascii")[:n_bytes]
