"""Four-phase pipeline: teacher preparation, teacher scoring, architecture
search, and retraining, with content-addressed stage artifacts.

Every stage writes into ``work_dir/artifacts/<stage>-<hash>/`` where the hash
covers the full config and seed, so re-running the same configuration reuses
completed stages. The test split is readable by the final evaluation stage
only; every split access is audited and the audit ships with the report.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import distill
from .autodiff import ContractViolation
from .checkpoint import load_checkpoint, save_checkpoint
from .data import (
    DatasetSplit,
    assert_splits_disjoint,
    load_labeled_split,
    load_teacher_records,
    make_synthetic_corpus,
    save_labeled_split,
    save_scored_pairs,
    save_teacher_records,
)
from .distill import (
    RuleTeacher,
    TeacherConfig,
    TeacherTrainConfig,
    TransformerTeacher,
    generate_teacher_data,
    soft_target,
    train_teacher,
)
from .hyperopt import (
    ChoiceDim,
    HpSpace,
    LogUniformDim,
    TrialFailed,
    UniformDim,
    run_search,
)
from .metrics import MetricsReport, pr_auc
from .model import ModelConfig, RelevanceModel, cost_model_for, fixed_cost
from .search import (
    EncodedRecords,
    RetrainConfig,
    SearchConfig,
    SearchDiverged,
    SearchTrace,
    evaluate_kd_loss,
    model_checksum,
    retrain_best,
    search_candidates,
    split_records,
    train_supernet,
)
from .search_space import CostModel, parse_genome
from .tokenizer import TriLetterVocab, build_vocab

STAGES = ("corpus", "teacher-train", "teacher-score", "supernet-train",
          "search", "hp-search", "retrain", "eval")


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CorpusSection:
    size: int = 50_000
    vocab_seed: int = 7
    noise: float = 0.05
    ratios: tuple[float, float, float] = (0.8, 0.1, 0.1)
    n_content_words: int = 300
    n_filler_words: int = 120


@dataclass(frozen=True)
class TeacherSection:
    kind: str = "transformer"  # or "rule"
    hidden: int = 96
    n_blocks: int = 2
    ffn_mult: int = 2
    epochs: int = 6
    batch_size: int = 256
    lr: float = 1e-3
    weight_decay: float = 2e-6
    max_train_samples: int | None = None


@dataclass(frozen=True)
class SupernetSection:
    epochs: int = 30
    batch_size: int = 256
    lr_max: float = 0.02
    lr_min: float = 1e-5
    t_cycle: int = 10
    weight_decay: float = 2e-6
    val_fraction: float = 0.1


@dataclass(frozen=True)
class SearchSection:
    m_candidates: int = 300
    c_max: float = 2.0
    eval_batch_size: int = 512
    max_eval_samples: int | None = None


@dataclass(frozen=True)
class HyperoptSection:
    trials: int = 8
    epochs_per_trial: int = 2
    max_train_samples: int = 16_384
    hidden_options: tuple[int, ...] = (48, 64, 80)
    d_rep_options: tuple[int, ...] = (16, 32)
    batch_options: tuple[int, ...] = (128, 256)
    lr_range: tuple[float, float] = (3e-4, 6e-3)
    keep_prob_range: tuple[float, float] = (0.6, 1.0)
    weight_decay_range: tuple[float, float] = (1e-7, 1e-4)


@dataclass(frozen=True)
class RetrainSection:
    epochs: int = 10
    batch_size: int = 256
    lr_max: float = 2e-3
    lr_min: float = 1e-5
    t_cycle: int = 10
    weight_decay: float = 2e-6


@dataclass(frozen=True)
class PipelineConfig:
    seed: int = 1234
    dtype: str = "float32"
    vocab_size: int = 8192
    # "dropout 0.8" is read as keep-probability 0.8; recorded so every run
    # names the interpretation it used
    dropout_semantics: str = "keep_prob"
    corpus: CorpusSection = field(default_factory=CorpusSection)
    model: ModelConfig = field(default_factory=lambda: ModelConfig(dtype="float32"))
    teacher: TeacherSection = field(default_factory=TeacherSection)
    supernet: SupernetSection = field(default_factory=SupernetSection)
    search: SearchSection = field(default_factory=SearchSection)
    hyperopt: HyperoptSection = field(default_factory=HyperoptSection)
    retrain: RetrainSection = field(default_factory=RetrainSection)


def _to_plain(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _to_plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (list, tuple)):
        return [_to_plain(x) for x in obj]
    return obj


def config_to_dict(cfg: PipelineConfig) -> dict:
    return _to_plain(cfg)


_SECTION_TYPES = {
    "corpus": CorpusSection,
    "model": ModelConfig,
    "teacher": TeacherSection,
    "supernet": SupernetSection,
    "search": SearchSection,
    "hyperopt": HyperoptSection,
    "retrain": RetrainSection,
}


def _build_section(cls, data: dict):
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name not in data:
            continue
        v = data[f.name]
        if isinstance(v, list):
            v = tuple(v)
        kwargs[f.name] = v
    return cls(**kwargs)


def config_from_dict(data: dict) -> PipelineConfig:
    kwargs = {}
    for f in dataclasses.fields(PipelineConfig):
        if f.name not in data:
            continue
        if f.name in _SECTION_TYPES:
            kwargs[f.name] = _build_section(_SECTION_TYPES[f.name], data[f.name])
        else:
            kwargs[f.name] = data[f.name]
    return PipelineConfig(**kwargs)


def load_config(path: str | Path) -> PipelineConfig:
    return config_from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def save_config(cfg: PipelineConfig, path: str | Path) -> None:
    Path(path).write_text(
        json.dumps(config_to_dict(cfg), indent=2, sort_keys=True) + "\n",
        encoding="utf-8",
    )


def config_hash(cfg: PipelineConfig) -> str:
    canon = json.dumps(config_to_dict(cfg), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()


# ---------------------------------------------------------------------------
# Context: artifact cache plus access audit
# ---------------------------------------------------------------------------

class PipelineContext:
    def __init__(self, config: PipelineConfig, work_dir: str | Path):
        self.config = config
        self.work_dir = Path(work_dir)
        self.hash = config_hash(config)
        self.audit: list[dict] = []
        self.current_stage: str | None = None
        (self.work_dir / "artifacts").mkdir(parents=True, exist_ok=True)

    def stage_dir(self, stage: str) -> Path:
        if stage not in STAGES:
            raise ContractViolation(f"unknown stage {stage!r}")
        d = self.work_dir / "artifacts" / f"{stage}-{self.hash[:12]}"
        d.mkdir(parents=True, exist_ok=True)
        return d

    def is_complete(self, stage: str) -> bool:
        return (self.stage_dir(stage) / "complete.json").exists()

    def mark_complete(self, stage: str, meta: dict) -> None:
        payload = {"stage": stage, "config_hash": self.hash, **meta}
        (self.stage_dir(stage) / "complete.json").write_text(
            json.dumps(payload, sort_keys=True, separators=(",", ":")) + "\n",
            encoding="utf-8",
        )

    def stage_meta(self, stage: str) -> dict:
        marker = self.stage_dir(stage) / "complete.json"
        if not marker.exists():
            raise ContractViolation(
                f"stage {stage!r} has no artifacts; run it (or `pipeline`) first"
            )
        return json.loads(marker.read_text(encoding="utf-8"))

    def _artifact(self, stage: str, filename: str) -> Path:
        path = self.stage_dir(stage) / filename
        if not path.exists():
            raise ContractViolation(
                f"missing artifact {filename!r}; run the {stage!r} stage first"
            )
        return path

    # -- audited split access ------------------------------------------------

    def load_split(self, role: str) -> DatasetSplit:
        path = self.stage_dir("corpus") / f"{role}.tsv"
        if not path.exists():
            raise ContractViolation(f"{role} split missing at {path}")
        self.audit.append({"stage": self.current_stage, "role": role})
        return load_labeled_split(path, role)

    def assert_test_isolated(self) -> None:
        for entry in self.audit:
            if entry["role"] == "test" and entry["stage"] != "eval":
                raise ContractViolation(
                    f"test split was read during stage {entry['stage']!r}"
                )

    # -- shared loaders ------------------------------------------------------

    def vocab(self) -> TriLetterVocab:
        return TriLetterVocab.load(self._artifact("corpus", "vocab.txt"))

    def teacher(self):
        cfg = self.config
        if cfg.teacher.kind == "rule":
            teacher = RuleTeacher()
            return teacher
        tensors, meta = load_checkpoint(self._artifact("teacher-train", "teacher.ckpt"))
        teacher = TransformerTeacher(
            TeacherConfig(hidden=cfg.teacher.hidden, n_blocks=cfg.teacher.n_blocks,
                          ffn_mult=cfg.teacher.ffn_mult,
                          len_query=cfg.model.len_query, len_ad=cfg.model.len_ad,
                          dtype=cfg.dtype),
            self.vocab(), np.random.default_rng(0))
        for p in teacher.parameters():
            p.data = tensors[p.name].astype(teacher.config.np_dtype)
        teacher.frozen = True
        return teacher

    def teacher_records(self):
        return load_teacher_records(self._artifact("teacher-score", "teacher_records.tsv"))

    def kd_splits(self):
        records = self.teacher_records()
        return split_records(records, self.config.supernet.val_fraction, self.config.seed)

    def base_model_config(self) -> ModelConfig:
        cfg = self.config
        return dataclasses.replace(cfg.model, vocab_size=cfg.vocab_size, dtype=cfg.dtype)

    def best_genome(self):
        text = self._artifact("search", "best_genome.txt").read_text(encoding="utf-8").strip()
        return parse_genome(text)

    def best_hp(self) -> dict:
        path = self._artifact("hp-search", "best_hp.json")
        return json.loads(path.read_text(encoding="utf-8"))


# ---------------------------------------------------------------------------
# Stages
# ---------------------------------------------------------------------------

def stage_corpus(ctx: PipelineContext) -> dict:
    cfg = ctx.config
    train, val, test = make_synthetic_corpus(
        cfg.corpus.size, vocab_seed=cfg.corpus.vocab_seed, noise=cfg.corpus.noise,
        seed=cfg.seed, ratios=cfg.corpus.ratios,
        n_content_words=cfg.corpus.n_content_words,
        n_filler_words=cfg.corpus.n_filler_words)
    assert_splits_disjoint([train, val, test])
    out = ctx.stage_dir("corpus")
    for split in (train, val, test):
        save_labeled_split(split, out / f"{split.role}.tsv")
    vocab = build_vocab((f"{r.query} {r.ad}" for r in train.records), cfg.vocab_size)
    vocab.save(out / "vocab.txt")
    return {"sizes": {"train": len(train), "validation": len(val), "test": len(test)},
            "vocab_size": len(vocab)}


def stage_teacher_train(ctx: PipelineContext) -> dict:
    cfg = ctx.config
    if cfg.teacher.kind == "rule":
        return {"kind": "rule", "param_count": 0}
    train = ctx.load_split("train")
    val = ctx.load_split("validation")
    vocab = ctx.vocab()
    teacher = TransformerTeacher(
        TeacherConfig(hidden=cfg.teacher.hidden, n_blocks=cfg.teacher.n_blocks,
                      ffn_mult=cfg.teacher.ffn_mult,
                      len_query=cfg.model.len_query, len_ad=cfg.model.len_ad,
                      dtype=cfg.dtype),
        vocab, np.random.default_rng([cfg.seed, 1]))
    history = train_teacher(
        teacher,
        [(r.query, r.ad, r.label) for r in train.records],
        TeacherTrainConfig(epochs=cfg.teacher.epochs, batch_size=cfg.teacher.batch_size,
                           lr=cfg.teacher.lr, weight_decay=cfg.teacher.weight_decay,
                           max_samples=cfg.teacher.max_train_samples),
        seed=cfg.seed + 1)
    teacher.frozen = True
    val_scores = soft_target(teacher.score_logits([(r.query, r.ad) for r in val.records]))
    val_auc = pr_auc(val_scores, [r.label for r in val.records])
    save_checkpoint(ctx.stage_dir("teacher-train") / "teacher.ckpt",
                    {p.name: p.data for p in teacher.parameters()},
                    meta={"kind": "transformer"})
    return {"kind": "transformer", "param_count": teacher.param_count(),
            "loss_history": history, "validation_pr_auc": val_auc}


def stage_teacher_score(ctx: PipelineContext) -> dict:
    train = ctx.load_split("train")
    teacher = ctx.teacher()
    records = generate_teacher_data(teacher, [(r.query, r.ad) for r in train.records])
    save_teacher_records(records, ctx.stage_dir("teacher-score") / "teacher_records.tsv")
    ys = np.array([r.y for r in records])
    return {"records": len(records), "mean_soft_target": float(ys.mean())}


def _supernet_search_config(ctx: PipelineContext) -> SearchConfig:
    cfg = ctx.config
    return SearchConfig(
        epochs=cfg.supernet.epochs, batch_size=cfg.supernet.batch_size,
        lr_max=cfg.supernet.lr_max, lr_min=cfg.supernet.lr_min,
        t_cycle=cfg.supernet.t_cycle, weight_decay=cfg.supernet.weight_decay,
        m_candidates=cfg.search.m_candidates, c_max=cfg.search.c_max,
        seed=cfg.seed + 2, val_fraction=cfg.supernet.val_fraction,
        eval_batch_size=cfg.search.eval_batch_size,
        max_eval_samples=cfg.search.max_eval_samples)


def stage_supernet_train(ctx: PipelineContext) -> dict:
    cfg = ctx.config
    sn_train, _ = ctx.kd_splits()
    model = RelevanceModel(ctx.base_model_config(), ctx.vocab(),
                           np.random.default_rng([cfg.seed, 2]))
    trace = train_supernet(model, sn_train, _supernet_search_config(ctx))
    out = ctx.stage_dir("supernet-train")
    trace.save(out / "supernet_trace.jsonl")
    save_checkpoint(out / "supernet.ckpt", model.state_dict(), meta={"role": "supernet"})
    losses = [r["loss"] for r in trace.records if r["kind"] == "supernet_step"]
    tenth = max(1, len(losses) // 10)
    return {"steps": len(losses), "first_tenth_loss": float(np.mean(losses[:tenth])),
            "last_tenth_loss": float(np.mean(losses[-tenth:])),
            "checksum": model_checksum(model)}


def stage_search(ctx: PipelineContext) -> dict:
    cfg = ctx.config
    _, kd_val = ctx.kd_splits()
    model = RelevanceModel(ctx.base_model_config(), ctx.vocab(),
                           np.random.default_rng([cfg.seed, 2]))
    tensors, _ = load_checkpoint(ctx._artifact("supernet-train", "supernet.ckpt"))
    model.load_state_dict(tensors)
    checksum = model_checksum(model)
    expected = ctx.stage_meta("supernet-train")["checksum"]
    if checksum != expected:
        raise ContractViolation("supernet checkpoint checksum mismatch on resume")
    cost_model = cost_model_for(ctx.base_model_config())
    trace = SearchTrace()
    ranked = search_candidates(model, kd_val, _supernet_search_config(ctx),
                               cost_model, trace)
    out = ctx.stage_dir("search")
    trace.save(out / "ranking_trace.jsonl")
    best = ranked[0]
    (out / "best_genome.txt").write_text(best.genome.to_text() + "\n", encoding="utf-8")
    ranking_rows = [c.to_record() for c in ranked]
    (out / "ranking.jsonl").write_text(
        "\n".join(json.dumps(r, sort_keys=True, separators=(",", ":")) for r in ranking_rows) + "\n",
        encoding="utf-8")
    return {"supernet_checksum": checksum, "candidates_ranked": len(ranked),
            "best_genome": best.genome.to_text(), "best_val_loss": best.val_loss,
            "best_cost": best.cost.total}


def _variant_cost_model(base_cfg: ModelConfig, hidden: int, d_rep: int) -> CostModel:
    base_cm = cost_model_for(base_cfg)
    variant_cfg = dataclasses.replace(base_cfg, hidden=hidden, d_rep=d_rep, mlp_hidden=(0, 0))
    params, time_units = fixed_cost(variant_cfg)
    return CostModel(hidden=hidden, len_query=base_cfg.len_query, len_ad=base_cfg.len_ad,
                     n_layers=base_cfg.n_layers, fixed_params=params, fixed_time=time_units,
                     norm_params=base_cm.norm_params, norm_time=base_cm.norm_time)


def build_hp_space(ctx: PipelineContext) -> HpSpace:
    """The retraining search space; hidden sizes violating the budget are
    dropped up front so every sampled point is feasible by construction."""
    cfg = ctx.config
    base_cfg = ctx.base_model_config()
    genome = ctx.best_genome()
    hidden_ok = []
    for h in cfg.hyperopt.hidden_options:
        d = min(cfg.hyperopt.d_rep_options)
        if _variant_cost_model(base_cfg, h, d).report(genome).total <= cfg.search.c_max:
            hidden_ok.append(h)
    if not hidden_ok:
        raise ContractViolation("no hidden size satisfies the budget; lower hidden_options")
    return HpSpace({
        "lr": LogUniformDim("lr", *cfg.hyperopt.lr_range),
        "batch_size": ChoiceDim("batch_size", tuple(cfg.hyperopt.batch_options)),
        "keep_prob": UniformDim("keep_prob", *cfg.hyperopt.keep_prob_range),
        "weight_decay": LogUniformDim("weight_decay", *cfg.hyperopt.weight_decay_range),
        "hidden": ChoiceDim("hidden", tuple(hidden_ok)),
        "d_rep": ChoiceDim("d_rep", tuple(cfg.hyperopt.d_rep_options)),
    })


def _model_config_for_point(ctx: PipelineContext, point: dict) -> ModelConfig:
    return dataclasses.replace(
        ctx.base_model_config(), hidden=int(point["hidden"]),
        d_rep=int(point["d_rep"]), mlp_hidden=(0, 0),
        dropout_keep_prob=float(point["keep_prob"]))


def stage_hp_search(ctx: PipelineContext) -> dict:
    cfg = ctx.config
    genome = ctx.best_genome()
    sn_train, kd_val = ctx.kd_splits()
    vocab = ctx.vocab()

    def objective(point: dict) -> float:
        model_cfg = _model_config_for_point(ctx, point)
        rc = RetrainConfig(epochs=cfg.hyperopt.epochs_per_trial,
                           batch_size=int(point["batch_size"]),
                           lr_max=float(point["lr"]), lr_min=cfg.retrain.lr_min,
                           t_cycle=cfg.retrain.t_cycle,
                           weight_decay=float(point["weight_decay"]),
                           seed=cfg.seed + 3,
                           max_train_samples=cfg.hyperopt.max_train_samples)
        try:
            model, _ = retrain_best(genome, sn_train, model_cfg, vocab, rc)
        except SearchDiverged as exc:
            raise TrialFailed(str(exc)) from exc
        data = EncodedRecords.build(kd_val, model)
        return evaluate_kd_loss(model, None, data, batch_size=512)

    log_path = ctx.stage_dir("hp-search") / "hp_trials.jsonl"
    best, records = run_search(objective, build_hp_space(ctx), cfg.hyperopt.trials,
                               seed=cfg.seed + 3, log_path=log_path)
    (ctx.stage_dir("hp-search") / "best_hp.json").write_text(
        json.dumps({"point": best.point, "objective": best.objective},
                   sort_keys=True, separators=(",", ":")) + "\n",
        encoding="utf-8")
    return {"trials": len(records), "best_objective": best.objective,
            "best_point": best.point}


def stage_retrain(ctx: PipelineContext) -> dict:
    cfg = ctx.config
    genome = ctx.best_genome()
    hp = ctx.best_hp()["point"]
    records = ctx.teacher_records()
    model_cfg = _model_config_for_point(ctx, hp)
    rc = RetrainConfig(epochs=cfg.retrain.epochs, batch_size=int(hp["batch_size"]),
                       lr_max=float(hp["lr"]), lr_min=cfg.retrain.lr_min,
                       t_cycle=cfg.retrain.t_cycle,
                       weight_decay=float(hp["weight_decay"]), seed=cfg.seed + 4)
    cost_model = _variant_cost_model(ctx.base_model_config(), int(hp["hidden"]), int(hp["d_rep"]))
    model, metrics = retrain_best(genome, records, model_cfg, ctx.vocab(), rc,
                                  cost_model=cost_model, c_max=cfg.search.c_max)
    out = ctx.stage_dir("retrain")
    save_checkpoint(out / "student.ckpt", model.state_dict(),
                    meta={"genome": genome.to_text(), "hp": hp,
                          "model_config": _to_plain(model_cfg)})
    metrics["param_count"] = model.param_count()
    metrics["cost"] = cost_model.report(genome).total
    return metrics


def _load_student(ctx: PipelineContext) -> RelevanceModel:
    tensors, meta = load_checkpoint(ctx._artifact("retrain", "student.ckpt"))
    model_cfg = _build_section(ModelConfig, meta["model_config"])
    model = RelevanceModel(model_cfg, ctx.vocab(), np.random.default_rng(0),
                           genome=parse_genome(meta["genome"]))
    model.load_state_dict(tensors)
    return model


def stage_eval(ctx: PipelineContext) -> dict:
    cfg = ctx.config
    test = ctx.load_split("test")
    labels = [r.label for r in test.records]
    model = _load_student(ctx)

    scores = []
    bs = 512
    for start in range(0, len(test.records), bs):
        chunk = test.records[start:start + bs]
        qs = [model.encode_text(r.query, "query") for r in chunk]
        ads = [model.encode_text(r.ad, "ad") for r in chunk]
        scores.extend(model.predict_pairs(qs, ads).data.tolist())
    student_auc = pr_auc(scores, labels)

    teacher = ctx.teacher()
    teacher_scores = soft_target(
        np.asarray(teacher.score_logits([(r.query, r.ad) for r in test.records])))
    teacher_auc = pr_auc(teacher_scores, labels)
    # student's distillation loss against the teacher's test-set soft targets
    s = np.clip(np.asarray(scores), 1e-7, 1 - 1e-7)
    y = np.clip(teacher_scores, 1e-7, 1 - 1e-7)
    student_test_kd = float(-np.mean(y * np.log(s) + (1 - y) * np.log(1 - s)))

    teacher_params = (ctx.stage_meta("teacher-train")["param_count"]
                      if cfg.teacher.kind == "transformer" else 0)
    if cfg.teacher.kind == "transformer" and teacher_params <= model.param_count():
        raise ContractViolation(
            f"teacher ({teacher_params}) must out-weigh the student ({model.param_count()})")

    run_id = f"{ctx.hash[:12]}-s{cfg.seed}"
    student_report = MetricsReport(pr_auc=student_auc, loss=student_test_kd,
                                   sample_count=len(labels), run_id=run_id,
                                   config_hash=ctx.hash)
    out = ctx.stage_dir("eval")
    save_scored_pairs([(r.query, r.ad, s) for r, s in zip(test.records, scores)],
                      out / "scored_pairs.tsv")
    ctx.assert_test_isolated()
    report = {
        "run_id": run_id,
        "config_hash": ctx.hash,
        "student": student_report.to_dict(),
        "sample_count": len(labels),
        "student_pr_auc": student_auc,
        "teacher_pr_auc": teacher_auc,
        "student_teacher_ratio": student_auc / teacher_auc,
        "student_param_count": model.param_count(),
        "teacher_param_count": teacher_params,
        "genome": model.genome.to_text(),
        "audit": ctx.audit,
    }
    (out / "final_report.json").write_text(
        json.dumps(report, sort_keys=True, separators=(",", ":")) + "\n",
        encoding="utf-8")
    return report


_STAGE_FUNCS = {
    "corpus": stage_corpus,
    "teacher-train": stage_teacher_train,
    "teacher-score": stage_teacher_score,
    "supernet-train": stage_supernet_train,
    "search": stage_search,
    "hp-search": stage_hp_search,
    "retrain": stage_retrain,
    "eval": stage_eval,
}


def run_stage(ctx: PipelineContext, stage: str, force: bool = False) -> dict:
    """Execute one stage (reusing its artifacts when already complete)."""
    if stage not in _STAGE_FUNCS:
        raise ContractViolation(f"unknown stage {stage!r}")
    if ctx.is_complete(stage) and not force:
        return ctx.stage_meta(stage)
    ctx.current_stage = stage
    t0 = time.time()
    meta = _STAGE_FUNCS[stage](ctx)
    ctx.current_stage = None
    ctx.mark_complete(stage, meta)
    meta = ctx.stage_meta(stage)
    meta["_elapsed_seconds"] = round(time.time() - t0, 3)
    return meta


def run_pipeline(config: PipelineConfig, work_dir: str | Path,
                 progress=None) -> dict:
    """All stages in order; returns the final evaluation report."""
    distill.reset_clamp_counter()
    ctx = PipelineContext(config, work_dir)
    for stage in STAGES:
        meta = run_stage(ctx, stage)
        if progress:
            progress(stage, meta)
    report = json.loads(
        (ctx.stage_dir("eval") / "final_report.json").read_text(encoding="utf-8"))
    run_dir = ctx.work_dir / "runs" / f"{ctx.hash[:12]}-{time.strftime('%Y%m%d-%H%M%S')}"
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "final_report.json").write_text(
        json.dumps(report, sort_keys=True, separators=(",", ":")) + "\n", encoding="utf-8")
    save_config(config, run_dir / "config.json")
    return report
