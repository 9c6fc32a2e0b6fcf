"""Teacher models, soft targets, and the distillation loss.

The production-size pretrained teacher is replaced by a small transformer
cross-encoder trained on synthetic data whose labels follow a planted rule:
a pair is relevant iff the fraction of query words appearing in the ad title
exceeds a threshold. A pure rule-based teacher is also provided for fast
harnesses.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ComputeGraph, ContractViolation, Parameter, Tensor
from .layers import (
    LayerParams,
    SequenceBatch,
    init_layer_params,
    layernorm,
    linear,
    masked_mean_pool,
    self_attention,
)
from .model import scatter_ids
from .optim import Adam, clip_grad_norm
from .tokenizer import EncodedText, TriLetterVocab, encode, words_of

EPS_CLAMP = 1e-7

# counts how many predictions had to be pulled off exactly 0 or 1
_clamp_events = 0


def clamp_event_count() -> int:
    return _clamp_events


def reset_clamp_counter() -> None:
    global _clamp_events
    _clamp_events = 0


def soft_target(z: float | np.ndarray, temperature: float = 1.0):
    """Two-logit softmax of (z, 0): sigmoid(z / T)."""
    if temperature <= 0:
        raise ContractViolation(f"temperature must be positive, got {temperature}")
    zt = np.asarray(z, dtype=np.float64) / temperature
    out = np.where(zt >= 0, 1.0 / (1.0 + np.exp(-np.abs(zt))),
                   np.exp(-np.abs(zt)) / (1.0 + np.exp(-np.abs(zt))))
    if np.ndim(z) == 0:
        return float(out)
    return out


def kd_loss(y, p: Tensor, reduction: str = "mean") -> Tensor:
    """Binary cross-entropy of predictions ``p`` against soft targets ``y``.

    ``y`` is a constant array in [0, 1]; ``p`` is the (tracked) prediction
    tensor. Predictions at exactly 0 or 1 are clamped to [eps, 1 - eps] and
    counted. ``reduction`` selects the per-sample mean (default) or the sum.
    """
    global _clamp_events
    if reduction not in ("mean", "sum"):
        raise ContractViolation(f"unknown reduction {reduction!r}")
    y_arr = np.asarray(y.data if isinstance(y, Tensor) else y, dtype=p.data.dtype)
    if y_arr.shape != p.shape:
        raise ContractViolation(f"targets shape {y_arr.shape} != predictions {p.shape}")
    if np.any((y_arr < 0) | (y_arr > 1)):
        raise ContractViolation("targets must lie in [0, 1]")
    n_clamped = int(np.sum((p.data <= 0.0) | (p.data >= 1.0)))
    if n_clamped:
        _clamp_events += n_clamped
    p_safe = ad.clamp(p, EPS_CLAMP, 1.0 - EPS_CLAMP)
    yt = Tensor(y_arr)
    per_sample = -(yt * ad.log(p_safe) + (1.0 - yt) * ad.log(1.0 - p_safe))
    return per_sample.mean() if reduction == "mean" else per_sample.sum()


# ---------------------------------------------------------------------------
# The planted relevance rule
# ---------------------------------------------------------------------------

RULE_THRESHOLD = 0.5


def overlap_fraction(query: str, title: str) -> float:
    """Fraction of distinct query words that appear in the title."""
    q = set(words_of(query))
    if not q:
        return 0.0
    t = set(words_of(title))
    return len(q & t) / len(q)


def rule_label(query: str, title: str, threshold: float = RULE_THRESHOLD) -> int:
    return 1 if overlap_fraction(query, title) > threshold else 0


@dataclass
class TeacherRecord:
    query: str
    ad: str
    z: float
    y: float

    def __post_init__(self):
        if not 0.0 < self.y < 1.0:
            raise ContractViolation(f"soft target {self.y} outside (0, 1)")


# ---------------------------------------------------------------------------
# Teachers
# ---------------------------------------------------------------------------

class RuleTeacher:
    """Oracle teacher scoring the planted rule directly; frozen by construction.

    The logit is a scaled margin around the rule threshold, so the soft
    target is monotone in the overlap fraction. ``title_words`` controls how
    many leading ad words count as the title when scoring raw ad text.
    """

    frozen = True

    def __init__(self, threshold: float = RULE_THRESHOLD, scale: float = 8.0,
                 title_words: int | None = None):
        self.threshold = threshold
        self.scale = scale
        self.title_words = title_words

    def score_logits(self, pairs: list[tuple[str, str]]) -> np.ndarray:
        out = np.zeros(len(pairs))
        for i, (q, ad_text) in enumerate(pairs):
            title = ad_text
            if self.title_words is not None:
                title = " ".join(words_of(ad_text)[: self.title_words])
            out[i] = self.scale * (overlap_fraction(q, title) - self.threshold)
        return out

    def param_count(self) -> int:
        return 0


@dataclass(frozen=True)
class TeacherConfig:
    hidden: int = 64
    n_blocks: int = 2
    ffn_mult: int = 2
    len_query: int = 16
    len_ad: int = 60
    dtype: str = "float64"

    @property
    def np_dtype(self):
        return np.float32 if self.dtype == "float32" else np.float64

    @property
    def total_len(self) -> int:
        return self.len_query + self.len_ad


class TransformerTeacher:
    """Small transformer cross-encoder over the joined query/ad word sequence.

    Query and ad tokens share one grid with positional and segment
    embeddings; two post-norm blocks feed a masked mean pool and a two-layer
    head emitting a single relevance logit.

    The q/k/v projections start as identity plus noise and the token
    embeddings use a wider range than the encoder towers do: identical words
    then attend to each other from the first step, which is the inductive
    bias a text-match cross-encoder needs to train quickly from scratch.
    """

    def __init__(self, config: TeacherConfig, vocab: TriLetterVocab,
                 rng: np.random.Generator):
        self.config = config
        self.vocab = vocab
        self.frozen = False
        h = config.hidden
        dt = config.np_dtype

        def u(shape, scale):
            return rng.uniform(-scale, scale, size=shape).astype(dt)

        self.emb_table = Parameter(u((len(vocab), h), 0.15), name="teacher.emb")
        self.pos = Parameter(np.zeros((config.total_len, h), dtype=dt), name="teacher.pos")
        self.seg = Parameter(np.zeros((2, h), dtype=dt), name="teacher.seg")
        self.blocks: list[dict] = []
        for b in range(config.n_blocks):
            attn = init_layer_params("self_attention", h, rng, dtype=dt,
                                     prefix=f"teacher.b{b}.attn")
            eye = np.eye(h, dtype=dt)
            for nm in ("wq", "wk", "wv"):
                attn.tensors[nm].data = eye + attn.tensors[nm].data * 0.2
            block = {
                "attn": attn,
                "ln1.g": Parameter(np.ones(h, dtype=dt), name=f"teacher.b{b}.ln1.g"),
                "ln1.b": Parameter(np.zeros(h, dtype=dt), name=f"teacher.b{b}.ln1.b"),
                "ffn.w1": Parameter(u((h, config.ffn_mult * h), 1.0 / math.sqrt(h)), name=f"teacher.b{b}.ffn.w1"),
                "ffn.b1": Parameter(np.zeros(config.ffn_mult * h, dtype=dt), name=f"teacher.b{b}.ffn.b1"),
                "ffn.w2": Parameter(u((config.ffn_mult * h, h), 1.0 / math.sqrt(config.ffn_mult * h)), name=f"teacher.b{b}.ffn.w2"),
                "ffn.b2": Parameter(np.zeros(h, dtype=dt), name=f"teacher.b{b}.ffn.b2"),
                "ln2.g": Parameter(np.ones(h, dtype=dt), name=f"teacher.b{b}.ln2.g"),
                "ln2.b": Parameter(np.zeros(h, dtype=dt), name=f"teacher.b{b}.ln2.b"),
            }
            self.blocks.append(block)
        self.head_w1 = Parameter(u((h, h), 1.0 / math.sqrt(h)), name="teacher.head.w1")
        self.head_b1 = Parameter(np.zeros(h, dtype=dt), name="teacher.head.b1")
        self.head_w2 = Parameter(u((h, 1), 1.0 / math.sqrt(h)), name="teacher.head.w2")
        self.head_b2 = Parameter(np.zeros(1, dtype=dt), name="teacher.head.b2")

    def parameters(self) -> list[Parameter]:
        ps = [self.emb_table, self.pos, self.seg]
        for block in self.blocks:
            attn: LayerParams = block["attn"]
            ps.extend(attn.parameters())
            ps.extend(v for k, v in block.items() if k != "attn")
        ps.extend([self.head_w1, self.head_b1, self.head_w2, self.head_b2])
        return ps

    def param_count(self) -> int:
        return sum(p.size for p in self.parameters())

    def encode_pair(self, query: str, ad_text: str) -> tuple[EncodedText, EncodedText]:
        cfg = self.config
        return (encode(query, self.vocab, cfg.len_query),
                encode(ad_text, self.vocab, cfg.len_ad))

    def forward_logits(self, queries: list[EncodedText], ads: list[EncodedText],
                       training: bool = False) -> Tensor:
        cfg = self.config
        B = len(queries)
        dt = cfg.np_dtype
        fq, rq, mq = scatter_ids(queries, cfg.len_query)
        fa, ra, ma = scatter_ids(ads, cfg.len_ad)
        # one grid: ad rows shifted past the query block
        flat_ids = np.concatenate([fq, fa])
        out_rows = np.concatenate([
            (rq // cfg.len_query) * cfg.total_len + rq % cfg.len_query,
            (ra // cfg.len_ad) * cfg.total_len + cfg.len_query + ra % cfg.len_ad,
        ])
        mask = np.concatenate([mq, ma], axis=1)
        tok = ad.embedding_rows(self.emb_table, flat_ids, out_rows,
                                (B, cfg.total_len, cfg.hidden))
        seg_ids = np.concatenate([np.zeros(cfg.len_query, dtype=np.int64),
                                  np.ones(cfg.len_ad, dtype=np.int64)])
        seg_ids = np.tile(seg_ids, B)
        seg = ad.embedding_rows(self.seg, seg_ids, np.arange(B * cfg.total_len),
                                (B, cfg.total_len, cfg.hidden))
        m3 = Tensor(mask[:, :, None].astype(dt))
        x = SequenceBatch((tok + self.pos + seg) * m3, mask)
        for block in self.blocks:
            attn_out = self_attention(x, block["attn"], training)
            normed = layernorm(x.values + attn_out.values, block["ln1.g"], block["ln1.b"])
            f = linear(ad.relu(linear(normed, block["ffn.w1"], block["ffn.b1"])),
                       block["ffn.w2"], block["ffn.b2"])
            out = layernorm(normed + f, block["ln2.g"], block["ln2.b"])
            x = SequenceBatch(out * m3, mask)
        pooled = masked_mean_pool(x)
        hidden = ad.relu(linear(pooled, self.head_w1, self.head_b1))
        logits = linear(hidden, self.head_w2, self.head_b2)
        return ad.reshape(logits, (B,))

    def score_logits(self, pairs: list[tuple[str, str]], batch_size: int = 256) -> np.ndarray:
        out = np.zeros(len(pairs))
        for start in range(0, len(pairs), batch_size):
            chunk = pairs[start:start + batch_size]
            qs, ads = zip(*(self.encode_pair(q, a) for q, a in chunk))
            logits = self.forward_logits(list(qs), list(ads))
            out[start:start + len(chunk)] = logits.data.astype(np.float64)
        return out


@dataclass
class TeacherTrainConfig:
    epochs: int = 6
    batch_size: int = 256
    lr: float = 1e-3
    weight_decay: float = 2e-6
    clip_norm: float = 5.0
    max_samples: int | None = None


def train_teacher(teacher: TransformerTeacher, labeled: list[tuple[str, str, int]],
                  cfg: TeacherTrainConfig, seed: int = 0) -> list[float]:
    """Fit the transformer teacher on hard labels; returns per-epoch mean loss."""
    if teacher.frozen:
        raise ContractViolation("teacher is frozen")
    rng = np.random.default_rng(seed)
    data = labeled[: cfg.max_samples] if cfg.max_samples else list(labeled)
    enc = [(teacher.encode_pair(q, a), float(lbl)) for q, a, lbl in data]
    opt = Adam(teacher.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    history = []
    for _ in range(cfg.epochs):
        order = rng.permutation(len(enc))
        losses = []
        for start in range(0, len(enc), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            qs = [enc[i][0][0] for i in idx]
            ads = [enc[i][0][1] for i in idx]
            ys = np.array([enc[i][1] for i in idx])
            with ComputeGraph() as graph:
                probs = ad.sigmoid(teacher.forward_logits(qs, ads, training=True))
                loss = kd_loss(ys, probs)
                graph.backward(loss)
            clip_grad_norm(teacher.parameters(), cfg.clip_norm)
            opt.step()
            losses.append(loss.item())
        history.append(float(np.mean(losses)))
    return history


def generate_teacher_data(teacher, pairs: list[tuple[str, str]],
                          temperature: float = 1.0) -> list[TeacherRecord]:
    """Score pairs with a frozen teacher, preserving input order."""
    if not getattr(teacher, "frozen", False):
        raise ContractViolation("teacher must be frozen before generating records")
    # |z| capped at 30 so the soft target stays strictly inside (0, 1) in
    # float64; ordering is unaffected.
    logits = np.clip(teacher.score_logits(pairs), -30.0, 30.0)
    return [
        TeacherRecord(query=q, ad=a, z=float(z), y=soft_target(float(z), temperature))
        for (q, a), z in zip(pairs, logits)
    ]
