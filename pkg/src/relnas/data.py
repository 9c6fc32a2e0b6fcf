"""Synthetic planted-rule corpus, dataset splits, and line-delimited file formats.

The corpus substitutes for search-log data: every pair's relevance follows a
known rule (query-word overlap with the ad title above a threshold), so both
teachers and students have a learnable, verifiable signal. Content words
(queries, titles) and filler words (descriptions, URLs) are disjoint
vocabularies, which makes the overlap computable from the full ad text.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autodiff import ContractViolation
from .distill import RULE_THRESHOLD, TeacherRecord, rule_label
from .tokenizer import join_ad_fields

SPLIT_ROLES = ("train", "validation", "test")


@dataclass
class LabeledPair:
    query: str
    ad: str
    label: int


@dataclass
class DatasetSplit:
    role: str
    records: list[LabeledPair]
    provenance: str

    def __post_init__(self):
        if self.role not in SPLIT_ROLES:
            raise ContractViolation(f"unknown split role {self.role!r}")

    def __len__(self) -> int:
        return len(self.records)

    def pair_keys(self) -> set[tuple[str, str]]:
        return {(r.query, r.ad) for r in self.records}


def assert_splits_disjoint(splits: list[DatasetSplit]) -> None:
    seen: set[tuple[str, str]] = set()
    for split in splits:
        keys = split.pair_keys()
        overlap = seen & keys
        if overlap:
            raise ContractViolation(
                f"split {split.role!r} shares {len(overlap)} pairs with earlier splits"
            )
        seen |= keys


def _make_words(rng: np.random.Generator, count: int, taken: set[str]) -> list[str]:
    letters = "abcdefghijklmnopqrstuvwxyz"
    out: list[str] = []
    while len(out) < count:
        n = int(rng.integers(3, 8))
        w = "".join(letters[i] for i in rng.integers(0, 26, size=n))
        if w not in taken:
            taken.add(w)
            out.append(w)
    return out


def make_synthetic_corpus(size: int, vocab_seed: int = 7, noise: float = 0.05,
                          seed: int = 0, ratios: tuple[float, float, float] = (0.8, 0.1, 0.1),
                          n_content_words: int = 300, n_filler_words: int = 120,
                          ) -> tuple[DatasetSplit, DatasetSplit, DatasetSplit]:
    """Generate `size` unique planted-rule pairs split into train/validation/test.

    Queries draw 2-4 distinct content words; the title replays a uniform
    number of them plus content fillers; description and URL use filler words
    only. Label noise (flips) applies to the train split alone, so held-out
    labels remain the exact rule.
    """
    if size < 100:
        raise ContractViolation(f"corpus size {size} below minimum 100")
    if not 0.0 <= noise < 0.5:
        raise ContractViolation(f"noise {noise} outside [0, 0.5)")
    if abs(sum(ratios) - 1.0) > 1e-9 or any(r <= 0 for r in ratios):
        raise ContractViolation(f"split ratios {ratios} must be positive and sum to 1")

    word_rng = np.random.default_rng(vocab_seed)
    taken: set[str] = set()
    content = _make_words(word_rng, n_content_words, taken)
    filler = _make_words(word_rng, n_filler_words, taken)

    rng = np.random.default_rng(seed)
    pairs: list[LabeledPair] = []
    seen: set[tuple[str, str]] = set()
    attempts = 0
    while len(pairs) < size:
        attempts += 1
        if attempts > 50 * size:
            raise ContractViolation("could not generate enough unique pairs; enlarge the vocabulary")
        q_len = int(rng.integers(2, 5))
        q_words = list(rng.choice(content, size=q_len, replace=False))
        n_overlap = int(rng.integers(0, q_len + 1))
        title_len = int(rng.integers(4, 7))
        title_words = list(rng.choice(q_words, size=n_overlap, replace=False))
        remaining = [w for w in content if w not in q_words]
        n_pad = max(0, title_len - n_overlap)
        title_words += list(rng.choice(remaining, size=n_pad, replace=False))
        desc_words = list(rng.choice(filler, size=int(rng.integers(3, 7)), replace=False))
        host = str(rng.choice(filler))
        query = " ".join(q_words)
        ad_text = join_ad_fields(" ".join(title_words), " ".join(desc_words), f"{host}.com")
        key = (query, ad_text)
        if key in seen:
            continue
        seen.add(key)
        pairs.append(LabeledPair(query, ad_text, rule_label(query, " ".join(title_words))))

    order = rng.permutation(size)
    n_train = int(round(size * ratios[0]))
    n_val = int(round(size * ratios[1]))
    buckets = {
        "train": [pairs[i] for i in order[:n_train]],
        "validation": [pairs[i] for i in order[n_train:n_train + n_val]],
        "test": [pairs[i] for i in order[n_train + n_val:]],
    }
    flips = rng.random(len(buckets["train"])) < noise
    for rec, flip in zip(buckets["train"], flips):
        if flip:
            rec.label = 1 - rec.label

    note = (
        f"planted-rule corpus: size={size} vocab_seed={vocab_seed} "
        f"noise={noise} seed={seed} threshold={RULE_THRESHOLD} (train-only noise)"
    )
    splits = tuple(DatasetSplit(role, buckets[role], note) for role in SPLIT_ROLES)
    assert_splits_disjoint(list(splits))
    return splits


# ---------------------------------------------------------------------------
# Line-delimited files (UTF-8, tab-separated, escaped)
# ---------------------------------------------------------------------------

def _escape(s: str) -> str:
    return s.replace("\\", "\\\\").replace("\t", "\\t").replace("\n", "\\n")


def _unescape(s: str) -> str:
    out = []
    i = 0
    while i < len(s):
        c = s[i]
        if c == "\\" and i + 1 < len(s):
            nxt = s[i + 1]
            if nxt == "t":
                out.append("\t")
            elif nxt == "n":
                out.append("\n")
            elif nxt == "\\":
                out.append("\\")
            else:
                out.append(nxt)
            i += 2
        else:
            out.append(c)
            i += 1
    return "".join(out)


def save_labeled_split(split: DatasetSplit, path: str | Path) -> None:
    lines = [f"# role={split.role}\t{_escape(split.provenance)}"]
    for r in split.records:
        lines.append(f"{_escape(r.query)}\t{_escape(r.ad)}\t{r.label}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_labeled_split(path: str | Path, role: str) -> DatasetSplit:
    text = Path(path).read_text(encoding="utf-8").splitlines()
    if not text or not text[0].startswith("# role="):
        raise ContractViolation(f"{path}: missing split header")
    header_role, provenance = text[0][len("# role="):].split("\t", 1)
    if header_role != role:
        raise ContractViolation(f"{path}: role {header_role!r}, expected {role!r}")
    records = []
    for line in text[1:]:
        q, a, lbl = line.split("\t")
        records.append(LabeledPair(_unescape(q), _unescape(a), int(lbl)))
    return DatasetSplit(role, records, _unescape(provenance))


def save_teacher_records(records: list[TeacherRecord], path: str | Path) -> None:
    lines = [f"{_escape(r.query)}\t{_escape(r.ad)}\t{r.z!r}\t{r.y!r}" for r in records]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_teacher_records(path: str | Path) -> list[TeacherRecord]:
    records = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        q, a, z, y = line.split("\t")
        records.append(TeacherRecord(_unescape(q), _unescape(a), float(z), float(y)))
    return records


def save_scored_pairs(rows: list[tuple[str, str, float]], path: str | Path) -> None:
    lines = [f"{_escape(q)}\t{_escape(a)}\t{score!r}" for q, a, score in rows]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
