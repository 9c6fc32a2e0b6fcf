"""Candidate encoder operations and fixed layers.

All sequence layers map a (batch, L, h) SequenceBatch to the same shape, so
any of them can be stacked freely and joined by skip connections. Masked
positions never influence the output at valid positions: convolutions see
zeros there, pooling windows skip them, attention assigns them -inf logits,
and the GRU carries its state through them.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import ContractViolation, Parameter, Tensor

CONV_KERNELS = (1, 3, 5, 7)
POOL_WINDOW = 3
ATTENTION_HEADS = 8
BN_EPS = 1e-5
BN_MOMENTUM = 0.9
NEG_INF = -1e9

# Operation kinds, in genome op-id order.
OP_KINDS = (
    "conv1",
    "conv3",
    "conv5",
    "conv7",
    "maxpool3",
    "avgpool3",
    "bigru",
    "self_attention",
)


@dataclass
class LayerSpec:
    """One candidate operation at a given hidden size and sequence length."""

    kind: str
    hidden: int
    length: int

    def __post_init__(self):
        if self.kind not in OP_KINDS:
            raise ContractViolation(f"unknown layer kind {self.kind!r}")
        if self.hidden <= 0 or self.length <= 0:
            raise ContractViolation("hidden and length must be positive")
        if self.kind == "self_attention" and self.hidden % ATTENTION_HEADS:
            raise ContractViolation(
                f"hidden {self.hidden} not divisible by {ATTENTION_HEADS} heads"
            )


@dataclass
class SequenceBatch:
    """(batch, L, h) values plus a (batch, L) validity mask in {0, 1}."""

    values: Tensor
    mask: np.ndarray

    def __post_init__(self):
        if self.values.ndim != 3:
            raise ContractViolation(f"values must be 3-d, got {self.values.shape}")
        if self.mask.shape != self.values.shape[:2]:
            raise ContractViolation(
                f"mask shape {self.mask.shape} does not match values {self.values.shape}"
            )

    @property
    def batch(self) -> int:
        return self.values.shape[0]

    @property
    def length(self) -> int:
        return self.values.shape[1]

    @property
    def hidden(self) -> int:
        return self.values.shape[2]

    def mask3(self) -> Tensor:
        return Tensor(self.mask[:, :, None].astype(self.values.data.dtype))


class BatchNormState:
    """Affine parameters plus running statistics for one conv choice."""

    def __init__(self, hidden: int, dtype, prefix: str):
        self.gamma = Parameter(np.ones(hidden, dtype=dtype), name=f"{prefix}.gamma")
        self.beta = Parameter(np.zeros(hidden, dtype=dtype), name=f"{prefix}.beta")
        self.running_mean = np.zeros(hidden, dtype=dtype)
        self.running_var = np.ones(hidden, dtype=dtype)
        self.prefix = prefix

    def parameters(self) -> list[Parameter]:
        return [self.gamma, self.beta]

    def buffers(self) -> dict[str, np.ndarray]:
        return {
            f"{self.prefix}.running_mean": self.running_mean,
            f"{self.prefix}.running_var": self.running_var,
        }

    def load_buffers(self, tensors: dict[str, np.ndarray]) -> None:
        self.running_mean = tensors[f"{self.prefix}.running_mean"].copy()
        self.running_var = tensors[f"{self.prefix}.running_var"].copy()


@dataclass
class LayerParams:
    """Parameter bundle for one (kind, hidden) choice."""

    kind: str
    hidden: int
    tensors: dict[str, Parameter] = field(default_factory=dict)
    bn: BatchNormState | None = None

    def parameters(self) -> Iterator[Parameter]:
        yield from self.tensors.values()
        if self.bn is not None:
            yield from self.bn.parameters()


def _uniform(rng: np.random.Generator, shape, scale: float, dtype) -> np.ndarray:
    return rng.uniform(-scale, scale, size=shape).astype(dtype)


def init_layer_params(kind: str, hidden: int, rng: np.random.Generator,
                      dtype=np.float64, prefix: str = "layer") -> LayerParams:
    """Fresh parameters for one operation choice.

    Conv and linear weights are fan-in scaled; recurrent weights use the
    fixed uniform [-0.1, 0.1] range; biases start at zero.
    """
    p = LayerParams(kind=kind, hidden=hidden)
    h = hidden
    if kind.startswith("conv"):
        k = int(kind[4:])
        scale = 1.0 / np.sqrt(k * h)
        p.tensors["weight"] = Parameter(_uniform(rng, (k * h, h), scale, dtype), name=f"{prefix}.weight")
        p.tensors["bias"] = Parameter(np.zeros(h, dtype=dtype), name=f"{prefix}.bias")
        p.bn = BatchNormState(h, dtype, prefix=f"{prefix}.bn")
    elif kind in ("maxpool3", "avgpool3"):
        pass
    elif kind == "bigru":
        for d in ("fwd", "bwd"):
            p.tensors[f"{d}.w"] = Parameter(_uniform(rng, (h, 3 * h), 0.1, dtype), name=f"{prefix}.{d}.w")
            p.tensors[f"{d}.u"] = Parameter(_uniform(rng, (h, 3 * h), 0.1, dtype), name=f"{prefix}.{d}.u")
            p.tensors[f"{d}.b"] = Parameter(np.zeros(3 * h, dtype=dtype), name=f"{prefix}.{d}.b")
    elif kind == "self_attention":
        scale = 1.0 / np.sqrt(h)
        for nm in ("wq", "wk", "wv", "wo"):
            p.tensors[nm] = Parameter(_uniform(rng, (h, h), scale, dtype), name=f"{prefix}.{nm}")
        for nm in ("bq", "bk", "bv", "bo"):
            p.tensors[nm] = Parameter(np.zeros(h, dtype=dtype), name=f"{prefix}.{nm}")
    else:
        raise ContractViolation(f"unknown layer kind {kind!r}")
    return p


# ---------------------------------------------------------------------------
# Batch normalization over valid positions
# ---------------------------------------------------------------------------

def batchnorm_masked(x: Tensor, mask: np.ndarray, bn: BatchNormState, training: bool) -> Tensor:
    """Per-channel batchnorm whose statistics ignore masked positions."""
    dtype = x.data.dtype
    m3 = Tensor(mask[:, :, None].astype(dtype))
    if training:
        n = max(float(mask.sum()), 1.0)
        mean_ = ad.sum_(x * m3, axis=(0, 1)) / n
        centered = x - ad.reshape(mean_, (1, 1, x.shape[2]))
        var_ = ad.sum_(centered * centered * m3, axis=(0, 1)) / n
        bn.running_mean = (BN_MOMENTUM * bn.running_mean + (1.0 - BN_MOMENTUM) * mean_.data).astype(dtype)
        bn.running_var = (BN_MOMENTUM * bn.running_var + (1.0 - BN_MOMENTUM) * var_.data).astype(dtype)
        inv = 1.0 / ad.sqrt(var_ + BN_EPS)
        normed = centered * ad.reshape(inv, (1, 1, x.shape[2]))
    else:
        inv = 1.0 / np.sqrt(bn.running_var + BN_EPS)
        normed = (x - Tensor(bn.running_mean)) * Tensor(inv)
    return normed * bn.gamma + bn.beta


# ---------------------------------------------------------------------------
# The four operation families
# ---------------------------------------------------------------------------

def conv_block(x: SequenceBatch, k: int, params: LayerParams, training: bool = False) -> SequenceBatch:
    """ReLU, then SAME-padded 1-d convolution over positions, then batchnorm."""
    if k not in CONV_KERNELS:
        raise ContractViolation(f"kernel {k} not in {CONV_KERNELS}")
    h = x.hidden
    if params.tensors["weight"].shape != (k * h, h):
        raise ContractViolation(
            f"conv weight shape {params.tensors['weight'].shape} incompatible with k={k}, h={h}"
        )
    v = ad.relu(x.values) * x.mask3()
    if k == 1:
        cols = v
    else:
        half = k // 2
        padded = ad.pad_axis(v, 1, half, half)
        cols = ad.concat([ad.narrow(padded, 1, i, x.length) for i in range(k)], axis=2)
    out = cols @ params.tensors["weight"] + params.tensors["bias"]
    if params.bn is not None:
        out = batchnorm_masked(out, x.mask, params.bn, training)
    return SequenceBatch(out * x.mask3(), x.mask)


def pool(x: SequenceBatch, mode: str) -> SequenceBatch:
    """Window-3, stride-1, SAME-padded pooling; masked positions are excluded."""
    if mode not in ("max", "avg"):
        raise ContractViolation(f"pool mode {mode!r}")
    dtype = x.values.data.dtype
    L = x.length
    m3 = x.mask3()
    if mode == "avg":
        v = x.values * m3
        padded = ad.pad_axis(v, 1, 1, 1)
        total = ad.narrow(padded, 1, 0, L) + ad.narrow(padded, 1, 1, L) + ad.narrow(padded, 1, 2, L)
        mpad = np.pad(x.mask, ((0, 0), (1, 1)))
        counts = mpad[:, 0:L] + mpad[:, 1:L + 1] + mpad[:, 2:L + 2]
        counts = np.maximum(counts, 1.0)[:, :, None].astype(dtype)
        out = total / Tensor(counts)
    else:
        neg = Tensor(((1.0 - x.mask) * NEG_INF)[:, :, None].astype(dtype))
        v = x.values * m3 + neg
        padded = ad.pad_axis(v, 1, 1, 1, value=NEG_INF)
        out = ad.maximum(
            ad.maximum(ad.narrow(padded, 1, 0, L), ad.narrow(padded, 1, 1, L)),
            ad.narrow(padded, 1, 2, L),
        )
    return SequenceBatch(out * m3, x.mask)


def _gru_direction(v: Tensor, mask: np.ndarray, w: Parameter, u: Parameter, b: Parameter,
                   reverse: bool) -> list[Tensor]:
    """One GRU direction over a masked sequence; returns per-step (B, h) states."""
    B, L, h = v.shape
    dtype = v.data.dtype
    gates_x = v @ w + b  # (B, L, 3h)
    h_t = Tensor(np.zeros((B, h), dtype=dtype))
    order = range(L - 1, -1, -1) if reverse else range(L)
    states: dict[int, Tensor] = {}
    for t in order:
        gx = ad.reshape(ad.narrow(gates_x, 1, t, 1), (B, 3 * h))
        gh = h_t @ u
        r = ad.sigmoid(ad.narrow(gx, 1, 0, h) + ad.narrow(gh, 1, 0, h))
        z = ad.sigmoid(ad.narrow(gx, 1, h, h) + ad.narrow(gh, 1, h, h))
        n = ad.tanh(ad.narrow(gx, 1, 2 * h, h) + r * ad.narrow(gh, 1, 2 * h, h))
        h_new = (1.0 - z) * n + z * h_t
        m_t = Tensor(mask[:, t:t + 1].astype(dtype))
        h_t = m_t * h_new + (1.0 - m_t) * h_t
        states[t] = h_t
    return [states[t] for t in range(L)]


def bigru(x: SequenceBatch, params: LayerParams, training: bool = False) -> SequenceBatch:
    """Bi-directional GRU; the two directions' outputs are summed."""
    v = x.values * x.mask3()
    fwd = _gru_direction(v, x.mask, params.tensors["fwd.w"], params.tensors["fwd.u"],
                         params.tensors["fwd.b"], reverse=False)
    bwd = _gru_direction(v, x.mask, params.tensors["bwd.w"], params.tensors["bwd.u"],
                         params.tensors["bwd.b"], reverse=True)
    summed = [f + b for f, b in zip(fwd, bwd)]
    out = ad.stack(summed, axis=1)
    if not ad._is_finite(out.data):
        raise ad.NumericFailure("non-finite value in GRU recurrence")
    return SequenceBatch(out * x.mask3(), x.mask)


def self_attention(x: SequenceBatch, params: LayerParams, training: bool = False) -> SequenceBatch:
    """Multi-head scaled dot-product self-attention over valid positions."""
    B, L, h = x.values.shape
    if h % ATTENTION_HEADS:
        raise ContractViolation(f"hidden {h} not divisible by {ATTENTION_HEADS}")
    dh = h // ATTENTION_HEADS
    dtype = x.values.data.dtype
    m3 = x.mask3()
    v_in = x.values * m3

    def heads(t: Tensor) -> Tensor:
        return ad.transpose(ad.reshape(t, (B, L, ATTENTION_HEADS, dh)), (0, 2, 1, 3))

    # scale is folded into q before the (L, L) product: one pass over the
    # small projection instead of two over the quadratic score tensor
    scale = 1.0 / float(np.sqrt(dh))
    q = heads((v_in @ params.tensors["wq"] + params.tensors["bq"]) * scale)
    k = heads(v_in @ params.tensors["wk"] + params.tensors["bk"])
    v = heads(v_in @ params.tensors["wv"] + params.tensors["bv"])
    scores = q @ ad.transpose(k, (0, 1, 3, 2))
    bias = Tensor(((1.0 - x.mask) * NEG_INF)[:, None, None, :].astype(dtype))
    attn = ad.softmax(scores + bias, axis=-1)
    ctx = attn @ v
    merged = ad.reshape(ad.transpose(ctx, (0, 2, 1, 3)), (B, L, h))
    out = merged @ params.tensors["wo"] + params.tensors["bo"]
    return SequenceBatch(out * m3, x.mask)


def attention_weights(x: SequenceBatch, params: LayerParams) -> np.ndarray:
    """The (B, heads, L, L) attention matrix, for inspection and tests."""
    B, L, h = x.values.shape
    dh = h // ATTENTION_HEADS
    dtype = x.values.data.dtype
    v_in = x.values * x.mask3()

    def heads(t: Tensor) -> Tensor:
        return ad.transpose(ad.reshape(t, (B, L, ATTENTION_HEADS, dh)), (0, 2, 1, 3))

    scale = 1.0 / float(np.sqrt(dh))
    q = heads((v_in @ params.tensors["wq"] + params.tensors["bq"]) * scale)
    k = heads(v_in @ params.tensors["wk"] + params.tensors["bk"])
    scores = q @ ad.transpose(k, (0, 1, 3, 2))
    bias = Tensor(((1.0 - x.mask) * NEG_INF)[:, None, None, :].astype(dtype))
    return ad.softmax(scores + bias, axis=-1).data


def apply_layer(kind: str, x: SequenceBatch, params: LayerParams, training: bool = False) -> SequenceBatch:
    if kind.startswith("conv"):
        return conv_block(x, int(kind[4:]), params, training)
    if kind == "maxpool3":
        return pool(x, "max")
    if kind == "avgpool3":
        return pool(x, "avg")
    if kind == "bigru":
        return bigru(x, params, training)
    if kind == "self_attention":
        return self_attention(x, params, training)
    raise ContractViolation(f"unknown layer kind {kind!r}")


# ---------------------------------------------------------------------------
# Shared fixed-layer pieces
# ---------------------------------------------------------------------------

def linear(x: Tensor, w: Parameter, b: Parameter | None = None) -> Tensor:
    out = x @ w
    if b is not None:
        out = out + b
    return out


def layernorm(x: Tensor, gamma: Parameter, beta: Parameter, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply the affine pair."""
    mu = ad.mean(x, axis=-1, keepdims=True)
    centered = x - mu
    var = ad.mean(centered * centered, axis=-1, keepdims=True)
    return centered / ad.sqrt(var + eps) * gamma + beta


def dropout(x: Tensor, keep_prob: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    """Inverted dropout parameterized by keep-probability."""
    if not (0.0 < keep_prob <= 1.0):
        raise ContractViolation(f"keep_prob {keep_prob} outside (0, 1]")
    if not training or keep_prob >= 1.0:
        return x
    if rng is None:
        raise ContractViolation("training-mode dropout needs an rng")
    keep = (rng.random(x.shape) < keep_prob).astype(x.data.dtype) / keep_prob
    return x * Tensor(keep)


def masked_mean_pool(x: SequenceBatch) -> Tensor:
    """Mean over valid sequence positions, (B, L, h) -> (B, h)."""
    dtype = x.values.data.dtype
    counts = np.maximum(x.mask.sum(axis=1), 1.0)[:, None].astype(dtype)
    return ad.sum_(x.values * x.mask3(), axis=1) / Tensor(counts)


# ---------------------------------------------------------------------------
# Deterministic cost model
# ---------------------------------------------------------------------------

def layer_cost(spec: LayerSpec) -> tuple[int, float]:
    """(parameter count, multiply-accumulate count for one length-L sequence).

    Closed forms per kind, with h = hidden, L = length:
      conv k:          params k*h^2 + h,         time L*k*h^2
      max/avg pool:    params 0,                 time 3*L*h
      bigru:           params 12*h^2 + 6*h,      time 12*L*h^2
      self_attention:  params 4*h^2 + 4*h,       time 4*L*h^2 + 2*L^2*h

    Normalization affine parameters inside conv blocks and elementwise work
    are excluded; this is an accounting convention, applied consistently.
    """
    h, L = spec.hidden, spec.length
    if spec.kind.startswith("conv"):
        k = int(spec.kind[4:])
        return k * h * h + h, float(L * k * h * h)
    if spec.kind in ("maxpool3", "avgpool3"):
        return 0, float(3 * L * h)
    if spec.kind == "bigru":
        return 12 * h * h + 6 * h, float(12 * L * h * h)
    if spec.kind == "self_attention":
        return 4 * h * h + 4 * h, float(4 * L * h * h + 2 * L * L * h)
    raise ContractViolation(f"unknown layer kind {spec.kind!r}")
