"""Two-stage one-shot search: distillation-guided supernet training, then
budget-filtered candidate ranking, then from-scratch retraining of the pick.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .autodiff import ComputeGraph, ContractViolation
from .distill import TeacherRecord, kd_loss
from .metrics import pr_auc
from .model import ModelConfig, RelevanceModel
from .optim import Adam, clip_grad_norm, cosine_lr
from .search_space import (
    ArchitectureGenome,
    CostModel,
    CostReport,
    OP_KINDS,
    REFERENCE_GENOME_TEXT,
    enumerate_small,
    parse_genome,
    sample_uniform,
    space_size,
)
from .tokenizer import TriLetterVocab

TRACE_FORMAT = {"format": "relnas-trace", "version": 1}


class SearchDiverged(RuntimeError):
    """Training produced a non-finite loss; carries the trace so far."""

    def __init__(self, message: str, trace: "SearchTrace"):
        super().__init__(message)
        self.trace = trace


class EmptySearchError(RuntimeError):
    """Every sampled candidate violated the budget; raise c_max and retry."""


@dataclass
class SearchConfig:
    epochs: int = 30
    batch_size: int = 256
    lr_max: float = 0.02
    lr_min: float = 1e-5
    t_cycle: int = 10
    weight_decay: float = 2e-6
    clip_norm: float = 5.0
    m_candidates: int = 300
    c_max: float = 2.0
    seed: int = 0
    val_fraction: float = 0.1
    eval_batch_size: int = 512
    max_eval_samples: int | None = None

    def __post_init__(self):
        if self.epochs <= 0 or self.batch_size <= 0 or self.m_candidates <= 0:
            raise ContractViolation("epochs, batch_size, m_candidates must be positive")
        if not 0.0 < self.val_fraction < 1.0:
            raise ContractViolation("val_fraction must lie in (0, 1)")
        if self.c_max <= 0:
            raise ContractViolation("c_max must be positive")


class SearchTrace:
    """Ordered, replayable log of search events."""

    def __init__(self):
        self.records: list[dict] = []

    def add(self, **record) -> None:
        self.records.append(record)

    def to_jsonl(self) -> str:
        lines = [json.dumps(TRACE_FORMAT, sort_keys=True, separators=(",", ":"))]
        lines += [json.dumps(r, sort_keys=True, separators=(",", ":")) for r in self.records]
        return "\n".join(lines) + "\n"

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_jsonl(), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "SearchTrace":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        head = json.loads(lines[0])
        if head != TRACE_FORMAT:
            raise ContractViolation(f"unknown trace header {head}")
        trace = cls()
        trace.records = [json.loads(line) for line in lines[1:]]
        return trace


def checksum_tensors(tensors: dict[str, np.ndarray]) -> str:
    digest = hashlib.sha256()
    for name in sorted(tensors):
        digest.update(name.encode("utf-8"))
        digest.update(np.ascontiguousarray(tensors[name]).tobytes())
    return digest.hexdigest()


def model_checksum(model: RelevanceModel) -> str:
    return checksum_tensors(model.state_dict())


# ---------------------------------------------------------------------------
# Data plumbing
# ---------------------------------------------------------------------------

@dataclass
class EncodedRecords:
    """Teacher records pre-encoded once for repeated epochs."""

    queries: list
    ads: list
    targets: np.ndarray

    def __len__(self) -> int:
        return len(self.queries)

    @classmethod
    def build(cls, records: list[TeacherRecord], model: RelevanceModel) -> "EncodedRecords":
        return cls(
            queries=[model.encode_text(r.query, "query") for r in records],
            ads=[model.encode_text(r.ad, "ad") for r in records],
            targets=np.array([r.y for r in records]),
        )

    def subset(self, idx) -> tuple[list, list, np.ndarray]:
        return ([self.queries[i] for i in idx], [self.ads[i] for i in idx], self.targets[idx])


def split_records(records: list[TeacherRecord], val_fraction: float,
                  seed: int) -> tuple[list[TeacherRecord], list[TeacherRecord]]:
    """Deterministic disjoint train/validation split of the teacher-score set."""
    rng = np.random.default_rng([seed, 0xDA7A])
    order = rng.permutation(len(records))
    n_val = max(1, int(round(len(records) * val_fraction)))
    val_idx = set(order[:n_val].tolist())
    train = [records[i] for i in range(len(records)) if i not in val_idx]
    val = [records[i] for i in sorted(val_idx)]
    return train, val


# ---------------------------------------------------------------------------
# Stage 1: supernet training
# ---------------------------------------------------------------------------

def train_supernet(model: RelevanceModel, records: list[TeacherRecord],
                   config: SearchConfig, trace: SearchTrace | None = None) -> SearchTrace:
    """Single-path uniform-sampling training of the shared weights.

    Each optimizer step samples one genome, forwards both towers through it,
    and applies Adam to exactly the parameters that received gradients (the
    sampled slots plus the fixed layers). The learning rate follows the
    cosine schedule per epoch.
    """
    if not records:
        raise ContractViolation("no teacher records to train on")
    if model.genome is not None:
        raise ContractViolation("supernet training expects a model without a fixed genome")
    trace = trace or SearchTrace()
    data = EncodedRecords.build(records, model)
    rng = np.random.default_rng([config.seed, 0x50BE])
    opt = Adam(model.parameters(), lr=config.lr_max, weight_decay=config.weight_decay)
    k = model.config.n_layers
    step = 0
    for epoch in range(config.epochs):
        lr = cosine_lr(config.lr_max, config.lr_min, epoch, config.t_cycle)
        order = rng.permutation(len(data))
        for start in range(0, len(data), config.batch_size):
            idx = order[start:start + config.batch_size]
            qs, ads, ys = data.subset(idx)
            genome = sample_uniform(rng, k)
            with ComputeGraph() as graph:
                probs = model.predict_pairs(qs, ads, genome=genome, training=True, rng=rng)
                loss = kd_loss(ys, probs)
                loss_val = loss.item()
                if not np.isfinite(loss_val):
                    trace.add(kind="abort", epoch=epoch, step=step, reason="non-finite loss")
                    raise SearchDiverged(f"loss diverged at step {step}", trace)
                graph.backward(loss)
            clip_grad_norm(model.parameters(), config.clip_norm)
            opt.step(lr)
            trace.add(kind="supernet_step", epoch=epoch, step=step,
                      genome=genome.to_text(), loss=loss_val, lr=lr)
            step += 1
    return trace


# ---------------------------------------------------------------------------
# Stage 2: efficiency-filtered candidate ranking
# ---------------------------------------------------------------------------

@dataclass
class Candidate:
    genome: ArchitectureGenome
    cost: CostReport
    val_loss: float | None
    accepted: bool

    def to_record(self) -> dict:
        return {
            "genome": self.genome.to_text(),
            "cost": self.cost.total,
            "size": self.cost.size,
            "time": self.cost.time,
            "val_loss": self.val_loss,
            "accepted": self.accepted,
        }


def evaluate_kd_loss(model: RelevanceModel, genome: ArchitectureGenome | None,
                     data: EncodedRecords, batch_size: int = 512,
                     max_samples: int | None = None) -> float:
    """Mean per-sample distillation loss over a dataset, eval mode."""
    n = len(data) if max_samples is None else min(len(data), max_samples)
    if n == 0:
        raise ContractViolation("empty evaluation set")
    total = 0.0
    for start in range(0, n, batch_size):
        idx = range(start, min(start + batch_size, n))
        qs, ads, ys = data.subset(idx)
        probs = model.predict_pairs(qs, ads, genome=genome)
        total += kd_loss(ys, probs, reduction="sum").item()
    return total / n


def search_candidates(model: RelevanceModel, val_records: list[TeacherRecord],
                      config: SearchConfig, cost_model: CostModel,
                      trace: SearchTrace | None = None) -> list[Candidate]:
    """Rank uniformly sampled genomes by validation loss under the budget.

    Candidates priced above c_max are dropped before evaluation. Ranking is
    ascending loss, ties broken by cheaper cost then genome text. When the
    space is small enough to enumerate and m_candidates covers it, sampling
    is replaced by exhaustive enumeration (strictly better coverage at the
    same evaluation budget). The supernet weights are read-only throughout,
    enforced by checksum.
    """
    trace = trace or SearchTrace()
    before = model_checksum(model)
    k = model.config.n_layers
    if k <= 3 and config.m_candidates >= space_size(k):
        genomes = enumerate_small(k)
        trace.add(kind="candidate_source", mode="exhaustive", count=len(genomes))
    else:
        rng = np.random.default_rng([config.seed, 0xCA2D])
        seen = set()
        genomes = []
        for _ in range(config.m_candidates):
            g = sample_uniform(rng, k)
            if g not in seen:
                seen.add(g)
                genomes.append(g)
        trace.add(kind="candidate_source", mode="sampled", count=len(genomes))

    data = EncodedRecords.build(val_records, model)
    results: list[Candidate] = []
    for g in genomes:
        cost = cost_model.report(g)
        if cost.total > config.c_max:
            cand = Candidate(g, cost, None, accepted=False)
        else:
            loss = evaluate_kd_loss(model, g, data, config.eval_batch_size,
                                    config.max_eval_samples)
            cand = Candidate(g, cost, loss, accepted=True)
        results.append(cand)
        trace.add(kind="candidate", **cand.to_record())

    after = model_checksum(model)
    if before != after:
        raise ContractViolation("candidate search mutated supernet weights")
    accepted = [c for c in results if c.accepted]
    if not accepted:
        raise EmptySearchError(
            f"all {len(results)} candidates exceed c_max={config.c_max}; "
            "increase the budget or sample more candidates"
        )
    accepted.sort(key=lambda c: (c.val_loss, c.cost.total, c.genome.to_text()))
    return accepted


# ---------------------------------------------------------------------------
# Retraining
# ---------------------------------------------------------------------------

@dataclass
class RetrainConfig:
    epochs: int = 10
    batch_size: int = 256
    lr_max: float = 2e-3
    lr_min: float = 1e-5
    t_cycle: int = 10
    weight_decay: float = 2e-6
    clip_norm: float = 5.0
    seed: int = 0
    max_train_samples: int | None = None

    def scaled(self, **kw) -> "RetrainConfig":
        return replace(self, **kw)


def train_fixed_genome(model: RelevanceModel, records: list[TeacherRecord],
                       config: RetrainConfig, trace: SearchTrace | None = None) -> SearchTrace:
    """Distillation training of a single-genome model (no weight inheritance)."""
    if model.genome is None:
        raise ContractViolation("model needs a fixed genome")
    trace = trace or SearchTrace()
    data = EncodedRecords.build(records, model)
    n = len(data) if config.max_train_samples is None else min(len(data), config.max_train_samples)
    rng = np.random.default_rng([config.seed, 0x7EA1])
    opt = Adam(model.parameters(), lr=config.lr_max, weight_decay=config.weight_decay)
    step = 0
    for epoch in range(config.epochs):
        lr = cosine_lr(config.lr_max, config.lr_min, epoch, config.t_cycle)
        order = rng.permutation(n)
        epoch_losses = []
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            qs, ads, ys = data.subset(idx)
            with ComputeGraph() as graph:
                probs = model.predict_pairs(qs, ads, training=True, rng=rng)
                loss = kd_loss(ys, probs)
                loss_val = loss.item()
                if not np.isfinite(loss_val):
                    trace.add(kind="abort", epoch=epoch, step=step, reason="non-finite loss")
                    raise SearchDiverged(f"retraining diverged at step {step}", trace)
                graph.backward(loss)
            clip_grad_norm(model.parameters(), config.clip_norm)
            opt.step(lr)
            epoch_losses.append(loss_val)
            step += 1
        trace.add(kind="retrain_epoch", epoch=epoch,
                  mean_loss=float(np.mean(epoch_losses)), lr=lr)
    return trace


def retrain_best(genome: ArchitectureGenome, records: list[TeacherRecord],
                 model_config: ModelConfig, vocab: TriLetterVocab,
                 config: RetrainConfig, cost_model: CostModel | None = None,
                 c_max: float | None = None,
                 test_pairs: list[tuple[str, str, int]] | None = None,
                 ) -> tuple[RelevanceModel, dict]:
    """Fresh-initialization distillation training of one genome, plus metrics."""
    if cost_model is not None and c_max is not None:
        cost = cost_model.report(genome)
        if cost.total > c_max:
            raise ContractViolation(
                f"genome cost {cost.total:.4f} exceeds budget {c_max}"
            )
    rng = np.random.default_rng([config.seed, 0x11117])
    model = RelevanceModel(model_config, vocab, rng, genome=genome)
    trace = train_fixed_genome(model, records, config)
    metrics: dict = {"genome": genome.to_text(), "epochs": config.epochs}
    data = EncodedRecords.build(records, model)
    metrics["train_kd_loss"] = evaluate_kd_loss(model, None, data,
                                                batch_size=config.batch_size,
                                                max_samples=min(len(data), 4096))
    if test_pairs:
        scores = []
        labels = []
        for start in range(0, len(test_pairs), config.batch_size):
            chunk = test_pairs[start:start + config.batch_size]
            qs = [model.encode_text(q, "query") for q, _, _ in chunk]
            ads = [model.encode_text(a, "ad") for _, a, _ in chunk]
            scores.extend(model.predict_pairs(qs, ads).data.tolist())
            labels.extend(lbl for _, _, lbl in chunk)
        metrics["test_pr_auc"] = pr_auc(scores, labels)
    return model, metrics


# ---------------------------------------------------------------------------
# Fixed baselines
# ---------------------------------------------------------------------------

def baseline_genomes(n_layers: int = 6) -> dict[str, ArchitectureGenome]:
    """Five hand-designed references: four plain chains plus the multi-path one."""
    def chain(kind: str) -> ArchitectureGenome:
        op = OP_KINDS.index(kind)
        return ArchitectureGenome((op,) * n_layers, tuple(range(n_layers)), (0,) * n_layers)

    out = {
        "conv3_chain": chain("conv3"),
        "bigru_chain": chain("bigru"),
        "attention_chain": chain("self_attention"),
        "avgpool_chain": chain("avgpool3"),
    }
    if n_layers == 6:
        out["multi_path_reference"] = parse_genome(REFERENCE_GENOME_TEXT)
    return out
