"""Twin-tower relevance model.

Pipeline per pair: tri-letter embedding (+ per-side position embeddings),
shared pointwise projection to the hidden size, two encoder towers decoding
the same genome with separate weights, per-tower downscale, and a crossing
head over concat(q, a, |q - a|, q * a) ending in a sigmoid.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from .autodiff import ContractViolation, Parameter, Tensor
from .layers import SequenceBatch, dropout, linear
from .search_space import ArchitectureGenome, CostModel, SupernetStore, decode
from .tokenizer import EncodedText, TriLetterVocab, encode

SIDES = ("query", "ad")


def crossing_features(q: Tensor, a: Tensor) -> Tensor:
    """Interaction features concat(q, a, |q - a|, q * a) over (B, d) inputs."""
    if q.shape != a.shape:
        raise ContractViolation(f"representation shapes differ: {q.shape} vs {a.shape}")
    return ad.concat([q, a, ad.abs_(q - a), q * a], axis=1)


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 8192
    emb_dim: int = 32
    hidden: int = 64
    d_rep: int = 32
    n_layers: int = 6
    len_query: int = 16
    len_ad: int = 60
    mlp_hidden: tuple[int, int] = (0, 0)  # (0,0) -> (2*d_rep, d_rep)
    dropout_keep_prob: float = 0.8
    dtype: str = "float64"

    def resolved(self) -> "ModelConfig":
        if self.d_rep > self.hidden:
            raise ContractViolation("d_rep must not exceed hidden")
        if self.mlp_hidden == (0, 0):
            return replace(self, mlp_hidden=(2 * self.d_rep, self.d_rep))
        return self

    @property
    def np_dtype(self):
        return np.float32 if self.dtype == "float32" else np.float64

    def side_len(self, side: str) -> int:
        if side == "query":
            return self.len_query
        if side == "ad":
            return self.len_ad
        raise ContractViolation(f"unknown side {side!r}")


def scatter_ids(texts: list[EncodedText], max_len: int):
    """Flatten a batch of per-word id lists for the scatter-sum embedding.

    Returns (flat_ids, out_rows, mask) where out_rows indexes the flattened
    (batch * max_len) word grid.
    """
    flat_ids: list[int] = []
    out_rows: list[int] = []
    mask = np.zeros((len(texts), max_len))
    for b, text in enumerate(texts):
        words = text.word_ids[:max_len]
        mask[b, : len(words)] = 1.0
        for w, ids in enumerate(words):
            flat_ids.extend(ids)
            out_rows.extend([b * max_len + w] * len(ids))
    return (
        np.asarray(flat_ids, dtype=np.int64),
        np.asarray(out_rows, dtype=np.int64),
        mask,
    )


class RelevanceModel:
    """Parameter container plus forward passes for the twin-tower scorer.

    In supernet mode (``genome=None`` at construction) each tower holds every
    (layer, op) slot and the genome is supplied per forward call. A model
    built with a fixed genome allocates only that genome's slots.
    """

    def __init__(self, config: ModelConfig, vocab: TriLetterVocab,
                 rng: np.random.Generator, genome: ArchitectureGenome | None = None):
        cfg = config.resolved()
        self.config = cfg
        self.vocab = vocab
        self.genome = genome
        dt = cfg.np_dtype
        if len(vocab) > cfg.vocab_size:
            raise ContractViolation(
                f"vocab has {len(vocab)} entries, config allows {cfg.vocab_size}"
            )

        def u(shape, scale):
            return rng.uniform(-scale, scale, size=shape).astype(dt)

        self.emb_table = Parameter(u((len(vocab), cfg.emb_dim), 0.05), name="emb.table")
        self.pos = {
            "query": Parameter(np.zeros((cfg.len_query, cfg.emb_dim), dtype=dt), name="emb.pos.query"),
            "ad": Parameter(np.zeros((cfg.len_ad, cfg.emb_dim), dtype=dt), name="emb.pos.ad"),
        }
        self.init_conv_w = Parameter(u((cfg.emb_dim, cfg.hidden), 1.0 / np.sqrt(cfg.emb_dim)), name="init_conv.w")
        self.init_conv_b = Parameter(np.zeros(cfg.hidden, dtype=dt), name="init_conv.b")

        slot_keys = None
        if genome is not None:
            slot_keys = [(i, genome.op_kind(i)) for i in range(genome.n_layers)]
        self.towers = {
            side: SupernetStore(cfg.n_layers, cfg.hidden, rng, dtype=dt,
                                role=side, slot_keys=slot_keys)
            for side in SIDES
        }

        self.downscale = {
            side: (
                Parameter(u((cfg.hidden, cfg.d_rep), 1.0 / np.sqrt(cfg.hidden)), name=f"{side}.downscale.w"),
                Parameter(np.zeros(cfg.d_rep, dtype=dt), name=f"{side}.downscale.b"),
            )
            for side in SIDES
        }
        d4 = 4 * cfg.d_rep
        h1, h2 = cfg.mlp_hidden
        self.head = {
            "w1": Parameter(u((d4, h1), 1.0 / np.sqrt(d4)), name="head.w1"),
            "b1": Parameter(np.zeros(h1, dtype=dt), name="head.b1"),
            "w2": Parameter(u((h1, h2), 1.0 / np.sqrt(h1)), name="head.w2"),
            "b2": Parameter(np.zeros(h2, dtype=dt), name="head.b2"),
            "ws": Parameter(u((d4, h2), 1.0 / np.sqrt(d4)), name="head.ws"),
            "bs": Parameter(np.zeros(h2, dtype=dt), name="head.bs"),
            "wo": Parameter(u((h2, 1), 1.0 / np.sqrt(h2)), name="head.wo"),
            "bo": Parameter(np.zeros(1, dtype=dt), name="head.bo"),
        }

    # -- parameter plumbing -------------------------------------------------

    def fixed_parameters(self) -> list[Parameter]:
        ps = [self.emb_table, self.pos["query"], self.pos["ad"],
              self.init_conv_w, self.init_conv_b]
        for side in SIDES:
            ps.extend(self.downscale[side])
        ps.extend(self.head.values())
        return ps

    def parameters(self) -> list[Parameter]:
        ps = self.fixed_parameters()
        for side in SIDES:
            for p in self.towers[side].parameters():
                ps.append(p)
        return ps

    def param_count(self) -> int:
        return sum(p.size for p in self.parameters())

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {p.name: p.data for p in self.parameters()}
        for side in SIDES:
            out.update(self.towers[side].buffers())
        return out

    def load_state_dict(self, tensors: dict[str, np.ndarray]) -> None:
        for p in self.parameters():
            if p.name not in tensors:
                raise ContractViolation(f"checkpoint missing tensor {p.name!r}")
            if tensors[p.name].shape != p.shape:
                raise ContractViolation(f"shape mismatch for {p.name!r}")
            p.data = tensors[p.name].astype(self.config.np_dtype)
        for side in SIDES:
            for slot in self.towers[side].slots.values():
                if slot.bn is not None:
                    slot.bn.load_buffers(tensors)

    # -- forward pieces -----------------------------------------------------

    def embed_batch(self, texts: list[EncodedText], side: str) -> SequenceBatch:
        cfg = self.config
        L = cfg.side_len(side)
        flat_ids, out_rows, mask = scatter_ids(texts, L)
        summed = ad.embedding_rows(self.emb_table, flat_ids, out_rows,
                                   (len(texts), L, cfg.emb_dim))
        m3 = Tensor(mask[:, :, None].astype(cfg.np_dtype))
        return SequenceBatch((summed + self.pos[side]) * m3, mask)

    def initial_conv(self, x: SequenceBatch) -> SequenceBatch:
        out = linear(x.values, self.init_conv_w, self.init_conv_b)
        return SequenceBatch(out * x.mask3(), x.mask)

    def tower_representation(self, texts: list[EncodedText], side: str,
                             genome: ArchitectureGenome | None = None,
                             training: bool = False) -> Tensor:
        genome = genome or self.genome
        if genome is None:
            raise ContractViolation("no genome given and model has none fixed")
        x = self.initial_conv(self.embed_batch(texts, side))
        pooled = decode(genome, self.towers[side], x, training=training)
        w, b = self.downscale[side]
        return linear(pooled, w, b)

    def crossing(self, q: Tensor, a: Tensor, training: bool = False,
                 rng: np.random.Generator | None = None) -> Tensor:
        """Interaction head over two (B, d_rep) representations -> (B,) probs."""
        keep = self.config.dropout_keep_prob
        x = crossing_features(q, a)
        h1 = dropout(ad.relu(linear(x, self.head["w1"], self.head["b1"])), keep, rng, training)
        h2 = dropout(ad.relu(linear(h1, self.head["w2"], self.head["b2"])), keep, rng, training)
        shortcut = linear(x, self.head["ws"], self.head["bs"])
        logits = linear(h2 + shortcut, self.head["wo"], self.head["bo"])
        return ad.reshape(ad.sigmoid(logits), (q.shape[0],))

    def predict_pairs(self, queries: list[EncodedText], ads: list[EncodedText],
                      genome: ArchitectureGenome | None = None, training: bool = False,
                      rng: np.random.Generator | None = None) -> Tensor:
        q = self.tower_representation(queries, "query", genome, training)
        a = self.tower_representation(ads, "ad", genome, training)
        return self.crossing(q, a, training=training, rng=rng)

    # -- inference conveniences ----------------------------------------------

    def encode_text(self, text: str, side: str) -> EncodedText:
        return encode(text, self.vocab, self.config.side_len(side))

    def score(self, query: str, ad_text: str) -> float:
        """Deterministic eval-mode relevance probability for one pair."""
        probs = self.predict_pairs(
            [self.encode_text(query, "query")], [self.encode_text(ad_text, "ad")]
        )
        return float(probs.data[0])

    def precompute_side(self, texts: list[str], side: str = "ad") -> np.ndarray:
        """Representations for one side, one text at a time (serving parity)."""
        cfg = self.config
        reps = np.zeros((len(texts), cfg.d_rep), dtype=cfg.np_dtype)
        for i, text in enumerate(texts):
            rep = self.tower_representation([self.encode_text(text, side)], side)
            reps[i] = rep.data[0]
        return reps

    def score_with_rep(self, query: str, ad_rep: np.ndarray) -> float:
        q = self.tower_representation([self.encode_text(query, "query")], "query")
        probs = self.crossing(q, Tensor(ad_rep[None, :].copy()))
        return float(probs.data[0])


# ---------------------------------------------------------------------------
# Cost-model construction
# ---------------------------------------------------------------------------

def fixed_cost(config: ModelConfig) -> tuple[int, float]:
    """Parameter count and per-pair MAC count of everything outside the towers.

    Embedding lookups are table reads, not multiplies, and are excluded from
    the time estimate; the initial projection, downscales, and head dominate.
    """
    cfg = config.resolved()
    h1, h2 = cfg.mlp_hidden
    d4 = 4 * cfg.d_rep
    params = (
        cfg.vocab_size * cfg.emb_dim
        + (cfg.len_query + cfg.len_ad) * cfg.emb_dim
        + cfg.emb_dim * cfg.hidden + cfg.hidden
        + 2 * (cfg.hidden * cfg.d_rep + cfg.d_rep)
        + d4 * h1 + h1 + h1 * h2 + h2 + d4 * h2 + h2 + h2 + 1
    )
    time_units = float(
        (cfg.len_query + cfg.len_ad) * cfg.emb_dim * cfg.hidden
        + 2 * cfg.hidden * cfg.d_rep
        + d4 * h1 + h1 * h2 + d4 * h2 + h2
    )
    return params, time_units


def cost_model_for(config: ModelConfig) -> CostModel:
    cfg = config.resolved()
    params, time_units = fixed_cost(cfg)
    return CostModel(
        hidden=cfg.hidden,
        len_query=cfg.len_query,
        len_ad=cfg.len_ad,
        n_layers=cfg.n_layers,
        fixed_params=params,
        fixed_time=time_units,
    ).with_default_norms()
