"""Sequential model-based hyperparameter search (tree-structured Parzen estimator).

The first ``N_STARTUP`` suggestions are uniform random. After that, completed
trials are split at the GAMMA-quantile of the objective into good and bad
sets; each dimension gets a kernel density estimate for both sets, and the
point maximizing the good/bad density ratio among CANDIDATE_SAMPLES draws
from the good model is suggested. Failed trials never enter the densities.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .autodiff import ContractViolation

N_STARTUP = 10
GAMMA = 0.25
CANDIDATE_SAMPLES = 24


class TrialFailed(RuntimeError):
    """Raise inside an objective to mark the trial failed but continue the search."""


class AllTrialsFailed(RuntimeError):
    def __init__(self, records: list["TrialRecord"]):
        super().__init__(f"all {len(records)} trials failed")
        self.records = records


# ---------------------------------------------------------------------------
# Dimensions
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class UniformDim:
    name: str
    low: float
    high: float

    def __post_init__(self):
        if not self.low < self.high:
            raise ContractViolation(f"{self.name}: empty range [{self.low}, {self.high}]")

    def sample(self, rng) -> float:
        return float(rng.uniform(self.low, self.high))

    def contains(self, v) -> bool:
        return self.low <= v <= self.high

    def to_internal(self, v) -> float:
        return float(v)

    def from_internal(self, u: float):
        return float(min(max(u, self.low), self.high))

    def internal_width(self) -> float:
        return self.high - self.low


@dataclass(frozen=True)
class LogUniformDim:
    name: str
    low: float
    high: float

    def __post_init__(self):
        if not 0 < self.low < self.high:
            raise ContractViolation(f"{self.name}: need 0 < low < high")

    def sample(self, rng) -> float:
        return float(np.exp(rng.uniform(math.log(self.low), math.log(self.high))))

    def contains(self, v) -> bool:
        return self.low <= v <= self.high

    def to_internal(self, v) -> float:
        return math.log(v)

    def from_internal(self, u: float):
        return float(min(max(math.exp(u), self.low), self.high))

    def internal_width(self) -> float:
        return math.log(self.high) - math.log(self.low)


@dataclass(frozen=True)
class ChoiceDim:
    name: str
    options: tuple

    def __post_init__(self):
        if not self.options:
            raise ContractViolation(f"{self.name}: no options")
        if len(set(self.options)) != len(self.options):
            raise ContractViolation(f"{self.name}: duplicate options")

    def sample(self, rng):
        return self.options[int(rng.integers(len(self.options)))]

    def contains(self, v) -> bool:
        return v in self.options


Dimension = UniformDim | LogUniformDim | ChoiceDim


@dataclass
class HpSpace:
    """Named search dimensions; every sampled point satisfies all bounds."""

    dims: dict[str, Dimension] = field(default_factory=dict)

    def __post_init__(self):
        if not self.dims:
            raise ContractViolation("empty hyperparameter space")

    def sample(self, rng) -> dict:
        return {name: dim.sample(rng) for name, dim in self.dims.items()}

    def validate(self, point: dict) -> None:
        for name, dim in self.dims.items():
            if name not in point or not dim.contains(point[name]):
                raise ContractViolation(f"point outside space at dimension {name!r}")


@dataclass
class TrialRecord:
    point: dict
    objective: float | None
    status: str  # "completed" | "failed"

    def __post_init__(self):
        if self.status not in ("completed", "failed"):
            raise ContractViolation(f"bad status {self.status!r}")
        if self.status == "completed" and (
            self.objective is None or not math.isfinite(self.objective)
        ):
            raise ContractViolation("completed trials need a finite objective")

    def to_json(self) -> str:
        return json.dumps(
            {"point": self.point, "objective": self.objective, "status": self.status},
            sort_keys=True, separators=(",", ":"),
        )

    @classmethod
    def from_json(cls, line: str) -> "TrialRecord":
        d = json.loads(line)
        return cls(d["point"], d["objective"], d["status"])


# ---------------------------------------------------------------------------
# Density models
# ---------------------------------------------------------------------------

def _scott_bandwidth(values: np.ndarray, width: float) -> float:
    """Scott's rule with a floor of 5% of the (internal) range.

    Without the floor the bandwidth collapses once observations cluster,
    freezing the sampler on the cluster mode.
    """
    floor = max(width / 20.0, 1e-12)
    if len(values) < 2:
        return max(width / 4.0, floor)
    sigma = float(np.std(values))
    if sigma <= 0:
        return floor
    return max(sigma * len(values) ** -0.2, floor)


def _gaussian_mixture_logpdf(x: float, centers: np.ndarray, bw: float,
                             weights: np.ndarray) -> float:
    z = (x - centers) / bw
    log_terms = -0.5 * z * z - math.log(bw * math.sqrt(2 * math.pi)) + np.log(weights)
    m = float(np.max(log_terms))
    return m + math.log(float(np.sum(np.exp(log_terms - m))))


class _ContinuousKde:
    """Rank-weighted Gaussian mixture plus one flat prior component.

    Values must arrive best-first: earlier entries get linearly larger kernel
    weights, so the density mode tracks the best observations instead of the
    set centroid. The prior component (weight 1 / (n + 1)) keeps exploration
    alive once the observations cluster and gives the density full support.
    """

    def __init__(self, dim, values: list[float]):
        self.dim = dim
        self.centers = np.array([dim.to_internal(v) for v in values])
        self.bw = _scott_bandwidth(self.centers, dim.internal_width())
        self.uniform_logpdf = -math.log(dim.internal_width())
        n = len(self.centers)
        self.prior_weight = 1.0 / (n + 1.0)
        if n:
            raw = np.arange(n, 0, -1, dtype=np.float64)
            self.weights = raw / raw.sum()
        else:
            self.weights = np.zeros(0)

    def sample(self, rng):
        if len(self.centers) == 0 or rng.random() < self.prior_weight:
            return self.dim.sample(rng)
        c = self.centers[int(rng.choice(len(self.centers), p=self.weights))]
        return self.dim.from_internal(float(rng.normal(c, self.bw)))

    def logpdf(self, v) -> float:
        if len(self.centers) == 0:
            return self.uniform_logpdf
        kde = _gaussian_mixture_logpdf(self.dim.to_internal(v), self.centers,
                                       self.bw, self.weights)
        w = self.prior_weight
        m = max(kde, self.uniform_logpdf)
        return m + math.log(
            (1.0 - w) * math.exp(kde - m) + w * math.exp(self.uniform_logpdf - m)
        )


class _CategoricalModel:
    def __init__(self, dim: ChoiceDim, values: list):
        # values arrive best-first and are rank-weighted like the continuous case
        self.dim = dim
        n = len(values)
        rank_w = np.arange(n, 0, -1, dtype=np.float64)
        if n:
            rank_w = rank_w * (n / rank_w.sum())
        counts = np.array([
            1.0 + sum(w for v, w in zip(values, rank_w) if v == opt)
            for opt in dim.options
        ])
        self.probs = counts / counts.sum()

    def sample(self, rng):
        return self.dim.options[int(rng.choice(len(self.dim.options), p=self.probs))]

    def logpdf(self, v) -> float:
        return math.log(float(self.probs[self.dim.options.index(v)]))


def _fit_models(space: HpSpace, points: list[dict]) -> dict[str, object]:
    models: dict[str, object] = {}
    for name, dim in space.dims.items():
        values = [p[name] for p in points]
        if isinstance(dim, ChoiceDim):
            models[name] = _CategoricalModel(dim, values)
        else:
            models[name] = _ContinuousKde(dim, values)
    return models


# ---------------------------------------------------------------------------
# The optimizer
# ---------------------------------------------------------------------------

def suggest(history: list[TrialRecord], space: HpSpace, seed: int) -> dict:
    """Propose the next point given past trials.

    Uniform random during startup; afterwards the TPE ratio rule. The seed
    fully determines the proposal given the history.
    """
    rng = np.random.default_rng([seed, len(history), 0x7BE5])
    completed = [t for t in history if t.status == "completed"]
    if len(completed) < N_STARTUP:
        return space.sample(rng)
    ordered = sorted(completed, key=lambda t: t.objective)
    n_good = max(1, math.ceil(GAMMA * len(ordered)))
    good = [t.point for t in ordered[:n_good]]
    bad = [t.point for t in ordered[n_good:]]
    l_models = _fit_models(space, good)
    g_models = _fit_models(space, bad)  # empty bad set degrades to uniform/flat

    best_point = None
    best_score = -math.inf
    for _ in range(CANDIDATE_SAMPLES):
        point = {name: l_models[name].sample(rng) for name in space.dims}
        space.validate(point)
        score = 0.0
        for name in space.dims:
            score += l_models[name].logpdf(point[name]) - g_models[name].logpdf(point[name])
        if score > best_score:
            best_score = score
            best_point = point
    return best_point


def save_trials(records: list[TrialRecord], path: str | Path) -> None:
    Path(path).write_text("\n".join(t.to_json() for t in records) + "\n" if records else "",
                          encoding="utf-8")


def load_trials(path: str | Path) -> list[TrialRecord]:
    p = Path(path)
    if not p.exists():
        return []
    lines = [ln for ln in p.read_text(encoding="utf-8").splitlines() if ln.strip()]
    return [TrialRecord.from_json(ln) for ln in lines]


def run_search(objective: Callable[[dict], float], space: HpSpace, budget: int,
               seed: int, log_path: str | Path | None = None,
               ) -> tuple[TrialRecord, list[TrialRecord]]:
    """Sequential suggest/evaluate loop; returns (best trial, all trials).

    An objective may raise TrialFailed (or return a non-finite value) to mark
    a trial failed; failed trials are recorded but never modeled. With a
    ``log_path`` the loop appends each finished trial and resumes from any
    trials already on disk, counting them against the budget.
    """
    if budget < 1:
        raise ContractViolation("trial budget must be at least 1")
    history: list[TrialRecord] = load_trials(log_path) if log_path else []
    while len(history) < budget:
        point = suggest(history, space, seed)
        try:
            value = float(objective(point))
            if not math.isfinite(value):
                raise TrialFailed(f"objective returned {value}")
            record = TrialRecord(point, value, "completed")
        except TrialFailed:
            record = TrialRecord(point, None, "failed")
        history.append(record)
        if log_path:
            save_trials(history, log_path)
    completed = [t for t in history if t.status == "completed"]
    if not completed:
        raise AllTrialsFailed(history)
    best = min(completed, key=lambda t: t.objective)
    return best, history
