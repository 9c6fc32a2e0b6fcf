"""Tri-letter word hashing: vocabulary, text normalization, id encoding.

A word is wrapped in boundary markers ("#cat#") and split into overlapping
character 3-grams; a word's embedding is the plain sum of its 3-gram rows.
"""

from __future__ import annotations

import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from . import autodiff as ad
from .autodiff import ContractViolation, Tensor

UNK_ID = 0
UNK_TOKEN = "<unk>"

_NON_ALNUM = re.compile(r"[^a-z0-9]+")


def normalize(text: str) -> str:
    """Lowercase and replace every character outside [a-z0-9] with a space."""
    return _NON_ALNUM.sub(" ", text.lower()).strip()


def words_of(text: str) -> list[str]:
    text = normalize(text)
    return text.split() if text else []


def tri_letters(word: str) -> list[str]:
    """All contiguous 3-grams of "#" + word + "#". Always |word| of them."""
    word = word.strip().lower()
    if not word:
        raise ContractViolation("tri_letters requires a non-empty word")
    padded = f"#{word}#"
    return [padded[i:i + 3] for i in range(len(padded) - 2)]


def join_ad_fields(title: str, description: str, url: str) -> str:
    """Ad text = title + description + URL, dots in the URL host broken to spaces."""
    return " ".join(part for part in (title, description, url.replace(".", " ")) if part)


@dataclass
class TriLetterVocab:
    """Dense token -> id map with id 0 reserved for unknown tri-letters."""

    token_to_id: dict[str, int]
    tokens: list[str] = field(default_factory=list)

    def __post_init__(self):
        if not self.tokens:
            self.tokens = [""] * len(self.token_to_id)
            for tok, i in self.token_to_id.items():
                self.tokens[i] = tok
        if self.tokens[UNK_ID] != UNK_TOKEN:
            raise ContractViolation("vocab id 0 must be the unknown sentinel")

    def __len__(self) -> int:
        return len(self.tokens)

    def id_of(self, token: str) -> int:
        return self.token_to_id.get(token, UNK_ID)

    def save(self, path: str | Path) -> None:
        Path(path).write_text("\n".join(self.tokens) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "TriLetterVocab":
        tokens = Path(path).read_text(encoding="utf-8").splitlines()
        return cls({tok: i for i, tok in enumerate(tokens)}, tokens)


def build_vocab(corpus: Iterable[str], max_size: int) -> TriLetterVocab:
    """Keep the most frequent tri-letters, ties broken lexicographically.

    ``max_size`` caps the total vocabulary including the reserved unknown id.
    """
    if max_size < 1:
        raise ContractViolation("max_size must be at least 1")
    counts: Counter[str] = Counter()
    for text in corpus:
        for word in words_of(text):
            counts.update(tri_letters(word))
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    kept = [tok for tok, _ in ranked[: max_size - 1]]
    tokens = [UNK_TOKEN] + kept
    return TriLetterVocab({tok: i for i, tok in enumerate(tokens)}, tokens)


@dataclass
class EncodedText:
    """Per-word tri-letter id lists, truncated to the side's word budget."""

    word_ids: list[list[int]]

    def __len__(self) -> int:
        return len(self.word_ids)


def encode(text: str, vocab: TriLetterVocab, max_words: int) -> EncodedText:
    """Normalize, split, truncate from the right, map tri-letters to ids."""
    if max_words < 1:
        raise ContractViolation("max_words must be at least 1")
    ws = words_of(text)[:max_words]
    return EncodedText([[vocab.id_of(t) for t in tri_letters(w)] for w in ws])


def word_embedding(word_ids: list[int], table: Tensor) -> Tensor:
    """Unweighted sum of the table rows named by a word's tri-letter ids."""
    vocab_size = table.shape[0]
    for i in word_ids:
        if not 0 <= i < vocab_size:
            raise ContractViolation(f"tri-letter id {i} out of range [0, {vocab_size})")
    flat_ids = np.asarray(word_ids, dtype=np.int64)
    out_rows = np.zeros(len(word_ids), dtype=np.int64)
    summed = ad.embedding_rows(table, flat_ids, out_rows, (1, table.shape[1]))
    return ad.reshape(summed, (table.shape[1],))
