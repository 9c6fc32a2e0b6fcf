"""Evaluation metrics and the per-run report record."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .autodiff import ContractViolation


def pr_auc(scores, labels) -> float:
    """Area under the precision-recall curve, average-precision step form.

    Scores are swept descending; tied scores form a single threshold group.
    AP = sum over groups of (recall step) * (precision at that threshold),
    with no interpolation between points.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if s.shape != y.shape or s.ndim != 1:
        raise ContractViolation("scores and labels must be equal-length vectors")
    if not np.all((y == 0) | (y == 1)):
        raise ContractViolation("labels must be 0 or 1")
    n_pos = int(y.sum())
    if n_pos == 0:
        raise ContractViolation("pr_auc requires at least one positive label")

    order = np.argsort(-s, kind="stable")
    s_sorted = s[order]
    y_sorted = y[order].astype(np.int64)

    terms = []
    tp = 0
    seen = 0
    prev_recall = 0.0
    i = 0
    n = len(s_sorted)
    while i < n:
        j = i
        while j < n and s_sorted[j] == s_sorted[i]:
            j += 1
        tp += int(y_sorted[i:j].sum())
        seen += j - i
        recall = tp / n_pos
        precision = tp / seen
        terms.append((recall - prev_recall) * precision)
        prev_recall = recall
        i = j
    return math.fsum(terms)


@dataclass
class MetricsReport:
    """PR AUC plus loss for one evaluation pass, tied to a config hash."""

    pr_auc: float
    loss: float
    sample_count: int
    run_id: str
    config_hash: str

    def __post_init__(self):
        if not 0.0 <= self.pr_auc <= 1.0:
            raise ContractViolation(f"pr_auc {self.pr_auc} outside [0, 1]")

    def to_dict(self) -> dict:
        return asdict(self)
