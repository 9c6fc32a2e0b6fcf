"""Architecture genomes, the weight-sharing parameter store, and cost accounting.

A genome assigns each of k layers an operation (one of 8), an input (the
initial projection or an earlier layer's output), and a skip bit mask over
earlier layers. Decoding runs the layers in index order against a store
keyed by (layer index, operation), so any two genomes choosing the same
slot literally share its parameters.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .autodiff import ContractViolation, Parameter, Tensor
from .layers import (
    OP_KINDS,
    LayerParams,
    LayerSpec,
    SequenceBatch,
    apply_layer,
    init_layer_params,
    layer_cost,
    masked_mean_pool,
)

N_OPS = len(OP_KINDS)
_OP_INDEX = {k: i for i, k in enumerate(OP_KINDS)}
DEFAULT_LAYERS = 6

# A hand-picked multi-path reference: three convolutions (small kernels early,
# large late), two average-pools on a parallel path, one self-attention layer.
# Used as a fixed baseline and as a known-good decodable architecture.
REFERENCE_GENOME_TEXT = "conv3,0,0;avgpool3,0,0;conv5,1,2;avgpool3,3,0;self_attention,3,1;conv7,5,8"


@dataclass(frozen=True)
class ArchitectureGenome:
    """Per-layer (operation id, input index, skip mask) encoding.

    Input index 0 selects the shared initial projection; index j > 0 selects
    the output of layer j-1. Skip bit j of layer i (j < i) adds layer j's
    output to the selected input before the operation runs.
    """

    ops: tuple[int, ...]
    inputs: tuple[int, ...]
    skips: tuple[int, ...]

    def __post_init__(self):
        k = len(self.ops)
        if not (len(self.inputs) == len(self.skips) == k) or k == 0:
            raise ContractViolation("ops, inputs, skips must be equal-length and non-empty")
        for i in range(k):
            if not 0 <= self.ops[i] < N_OPS:
                raise ContractViolation(f"layer {i}: op id {self.ops[i]} out of range")
            if not 0 <= self.inputs[i] <= i:
                raise ContractViolation(f"layer {i}: input {self.inputs[i]} not in [0, {i}]")
            if not 0 <= self.skips[i] < (1 << i):
                raise ContractViolation(f"layer {i}: skip mask {self.skips[i]} out of range")

    @property
    def n_layers(self) -> int:
        return len(self.ops)

    def op_kind(self, i: int) -> str:
        return OP_KINDS[self.ops[i]]

    def skip_sources(self, i: int) -> list[int]:
        return [j for j in range(i) if self.skips[i] >> j & 1]

    def consumed_layers(self) -> set[int]:
        used: set[int] = set()
        for i in range(self.n_layers):
            if self.inputs[i] > 0:
                used.add(self.inputs[i] - 1)
            used.update(self.skip_sources(i))
        return used

    def leaf_layers(self) -> list[int]:
        used = self.consumed_layers()
        return [i for i in range(self.n_layers) if i not in used]

    def to_text(self) -> str:
        return ";".join(
            f"{OP_KINDS[self.ops[i]]},{self.inputs[i]},{self.skips[i]}"
            for i in range(self.n_layers)
        )

    def __str__(self) -> str:
        return self.to_text()


def parse_genome(text: str) -> ArchitectureGenome:
    """Inverse of ``ArchitectureGenome.to_text`` (bit-exact round trip)."""
    ops, inputs, skips = [], [], []
    for part in text.strip().split(";"):
        fields = part.split(",")
        if len(fields) != 3:
            raise ContractViolation(f"malformed genome triple {part!r}")
        kind, inp, mask = fields
        if kind not in _OP_INDEX:
            raise ContractViolation(f"unknown op name {kind!r}")
        ops.append(_OP_INDEX[kind])
        inputs.append(int(inp))
        skips.append(int(mask))
    return ArchitectureGenome(tuple(ops), tuple(inputs), tuple(skips))


def sample_uniform(rng: np.random.Generator, n_layers: int = DEFAULT_LAYERS) -> ArchitectureGenome:
    """Uniform genome: each op 1/8, input uniform on [0, i], fair-coin skip bits."""
    ops, inputs, skips = [], [], []
    for i in range(n_layers):
        ops.append(int(rng.integers(N_OPS)))
        inputs.append(int(rng.integers(i + 1)))
        mask = 0
        for j in range(i):
            mask |= int(rng.integers(2)) << j
        skips.append(mask)
    return ArchitectureGenome(tuple(ops), tuple(inputs), tuple(skips))


def enumerate_small(n_layers: int) -> list[ArchitectureGenome]:
    """Every genome of a small space, duplicate-free, in lexicographic order."""
    if n_layers > 3:
        raise ContractViolation(f"enumeration limited to 3 layers, got {n_layers}")
    if n_layers < 1:
        raise ContractViolation("need at least one layer")
    genomes: list[ArchitectureGenome] = []

    def extend(i: int, ops: tuple, inputs: tuple, skips: tuple) -> None:
        if i == n_layers:
            genomes.append(ArchitectureGenome(ops, inputs, skips))
            return
        for op in range(N_OPS):
            for inp in range(i + 1):
                for mask in range(1 << i):
                    extend(i + 1, ops + (op,), inputs + (inp,), skips + (mask,))

    extend(0, (), (), ())
    return genomes


def space_size(n_layers: int) -> int:
    total = 1
    for i in range(n_layers):
        total *= N_OPS * (i + 1) * (1 << i)
    return total


# ---------------------------------------------------------------------------
# Weight-sharing store
# ---------------------------------------------------------------------------

class SupernetStore:
    """All (layer, op) parameter slots for one encoder tower.

    Sampled genomes read and write only their chosen slots; everything else
    keeps its initialization until some genome visits it.
    """

    def __init__(self, n_layers: int, hidden: int, rng: np.random.Generator,
                 dtype=np.float64, role: str = "query",
                 slot_keys: list[tuple[int, str]] | None = None):
        self.n_layers = n_layers
        self.hidden = hidden
        self.role = role
        if slot_keys is None:
            slot_keys = [(i, kind) for i in range(n_layers) for kind in OP_KINDS]
        self.slots: dict[tuple[int, str], LayerParams] = {}
        for i, kind in slot_keys:
            self.slots[(i, kind)] = init_layer_params(
                kind, hidden, rng, dtype=dtype, prefix=f"{role}.L{i}.{kind}"
            )

    def parameters(self) -> Iterator[Parameter]:
        for slot in self.slots.values():
            yield from slot.parameters()

    def buffers(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for slot in self.slots.values():
            if slot.bn is not None:
                out.update(slot.bn.buffers())
        return out


def decode_layers(genome: ArchitectureGenome, store: SupernetStore, x: SequenceBatch,
                  training: bool = False) -> list[SequenceBatch]:
    """Run every layer of a genome, returning each layer's output in order."""
    if genome.n_layers > store.n_layers:
        raise ContractViolation(
            f"genome has {genome.n_layers} layers but store holds {store.n_layers}"
        )
    layer_outs: list[SequenceBatch] = []
    for i in range(genome.n_layers):
        src = x if genome.inputs[i] == 0 else layer_outs[genome.inputs[i] - 1]
        acc = src.values
        for j in genome.skip_sources(i):
            acc = acc + layer_outs[j].values
        kind = genome.op_kind(i)
        out = apply_layer(kind, SequenceBatch(acc, x.mask), store.slots[(i, kind)], training)
        layer_outs.append(out)
    return layer_outs


def decode(genome: ArchitectureGenome, store: SupernetStore, x: SequenceBatch,
           training: bool = False) -> Tensor:
    """Run a genome through a store; returns the pooled (batch, hidden) vector.

    Layer i's input is its selected source plus the elementwise sum of its
    skip sources. The final representation is the mean of all leaf outputs
    (outputs no later layer consumes), mean-pooled over valid positions.
    """
    layer_outs = decode_layers(genome, store, x, training)
    leaves = genome.leaf_layers()
    total = layer_outs[leaves[0]].values
    for i in leaves[1:]:
        total = total + layer_outs[i].values
    combined = SequenceBatch(total * (1.0 / len(leaves)), x.mask)
    return masked_mean_pool(combined)


# ---------------------------------------------------------------------------
# Cost accounting
# ---------------------------------------------------------------------------

@dataclass
class CostReport:
    raw_params: int
    raw_time_units: float
    size: float
    time: float

    @property
    def total(self) -> float:
        return self.size + self.time


@dataclass(frozen=True)
class CostModel:
    """Everything needed to price a genome: dims, fixed-layer cost, norms.

    size and time are the raw quantities divided by the reference maxima
    (``norm_params`` / ``norm_time``); by default those are the raw cost of
    the all-conv7 chain genome, so that genome prices at size = time = 1.
    """

    hidden: int
    len_query: int
    len_ad: int
    n_layers: int = DEFAULT_LAYERS
    fixed_params: int = 0
    fixed_time: float = 0.0
    norm_params: float = 0.0
    norm_time: float = 0.0

    def raw(self, genome: ArchitectureGenome) -> tuple[int, float]:
        params = self.fixed_params
        time_units = self.fixed_time
        for i in range(genome.n_layers):
            kind = genome.op_kind(i)
            p_q, t_q = layer_cost(LayerSpec(kind, self.hidden, self.len_query))
            p_a, t_a = layer_cost(LayerSpec(kind, self.hidden, self.len_ad))
            params += p_q + p_a  # towers share the genome but not weights
            time_units += t_q + t_a
        return params, time_units

    def with_default_norms(self) -> "CostModel":
        if self.norm_params > 0 and self.norm_time > 0:
            return self
        conv7 = _OP_INDEX["conv7"]
        reference = ArchitectureGenome(
            ops=(conv7,) * self.n_layers,
            inputs=tuple(range(self.n_layers)),
            skips=(0,) * self.n_layers,
        )
        params, time_units = self.raw(reference)
        return CostModel(
            hidden=self.hidden,
            len_query=self.len_query,
            len_ad=self.len_ad,
            n_layers=self.n_layers,
            fixed_params=self.fixed_params,
            fixed_time=self.fixed_time,
            norm_params=float(params),
            norm_time=float(time_units),
        )

    def report(self, genome: ArchitectureGenome) -> CostReport:
        if self.norm_params <= 0 or self.norm_time <= 0:
            raise ContractViolation("norms must be positive; call with_default_norms()")
        params, time_units = self.raw(genome)
        return CostReport(
            raw_params=params,
            raw_time_units=time_units,
            size=params / self.norm_params,
            time=time_units / self.norm_time,
        )


def genome_cost(genome: ArchitectureGenome, cost_model: CostModel) -> CostReport:
    """Price a genome under a cost model (Cost = size + time, both normalized)."""
    return cost_model.report(genome)
