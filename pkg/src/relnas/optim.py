"""Adam with decoupled weight decay, cosine-annealing schedule, gradient clipping."""

from __future__ import annotations

import math
from typing import Iterable

import numpy as np

from .autodiff import ContractViolation, Parameter


def cosine_lr(lr_max: float, lr_min: float, t_cur: int, t_cycle: int) -> float:
    """Cosine-annealed learning rate at epoch ``t_cur`` of a ``t_cycle`` schedule.

    Past the first cycle (t_cur > t_cycle) the position wraps to
    ``t_cur mod t_cycle``, giving warm restarts.
    """
    if lr_min > lr_max:
        raise ContractViolation(f"lr_min {lr_min} > lr_max {lr_max}")
    if t_cycle <= 0:
        raise ContractViolation("t_cycle must be positive")
    if t_cur < 0:
        raise ContractViolation("t_cur must be non-negative")
    pos = t_cur if t_cur <= t_cycle else t_cur % t_cycle
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * pos / t_cycle))


def clip_grad_norm(params: Iterable[Parameter], max_norm: float = 5.0) -> float:
    """Scale all gradients so their global L2 norm is at most ``max_norm``.

    Parameters without a gradient are ignored. Returns the pre-clip norm.
    """
    params = [p for p in params if p.grad is not None]
    total_sq = 0.0
    for p in params:
        total_sq += float(np.sum(p.grad.astype(np.float64) ** 2))
    total = math.sqrt(total_sq)
    if total > max_norm and total > 0.0:
        scale = max_norm / total
        for p in params:
            p.grad = p.grad * scale
    return total


class _Slot:
    __slots__ = ("m", "v", "t")

    def __init__(self, shape, dtype):
        self.m = np.zeros(shape, dtype=dtype)
        self.v = np.zeros(shape, dtype=dtype)
        self.t = 0


class Adam:
    """Adam with bias correction and decoupled weight decay.

    Moment buffers and the per-parameter step counter are created lazily on
    the first update of each parameter, and a parameter is only updated on
    steps where its gradient is populated. Parameters never touched by a
    backward pass therefore keep their initial values bit-for-bit, which is
    what shared-weight training relies on. Gradients are cleared (set back
    to None) after each update.
    """

    def __init__(self, params: Iterable[Parameter], lr: float = 1e-3,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0):
        self.params = list(params)
        if lr <= 0:
            raise ContractViolation("lr must be positive")
        if weight_decay < 0:
            raise ContractViolation("weight_decay must be non-negative")
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.slots: dict[int, _Slot] = {}

    def step(self, lr: float | None = None) -> None:
        """Apply one Adam update to every parameter with a populated gradient."""
        lr = self.lr if lr is None else lr
        if lr <= 0:
            raise ContractViolation("lr must be positive")
        b1, b2 = self.beta1, self.beta2
        for i, p in enumerate(self.params):
            g = p.grad
            if g is None:
                continue
            slot = self.slots.get(i)
            if slot is None:
                slot = self.slots[i] = _Slot(p.shape, p.data.dtype)
            slot.t += 1
            slot.m = b1 * slot.m + (1.0 - b1) * g
            slot.v = b2 * slot.v + (1.0 - b2) * (g * g)
            m_hat = slot.m / (1.0 - b1 ** slot.t)
            v_hat = slot.v / (1.0 - b2 ** slot.t)
            update = lr * m_hat / (np.sqrt(v_hat) + self.eps)
            if self.weight_decay:
                update = update + lr * self.weight_decay * p.data
            p.data = p.data - update
            p.grad = None

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def state_tensors(self) -> dict[str, np.ndarray]:
        """Flatten optimizer state to named arrays for checkpointing."""
        out: dict[str, np.ndarray] = {}
        for i, p in enumerate(self.params):
            slot = self.slots.get(i)
            if slot is None:
                continue
            key = p.name or f"param{i}"
            out[f"adam.m.{key}"] = slot.m
            out[f"adam.v.{key}"] = slot.v
            out[f"adam.t.{key}"] = np.array([slot.t], dtype=np.int64)
        return out

    def load_state_tensors(self, tensors: dict[str, np.ndarray]) -> None:
        for i, p in enumerate(self.params):
            key = p.name or f"param{i}"
            if f"adam.m.{key}" not in tensors:
                continue
            slot = _Slot(p.shape, p.data.dtype)
            slot.m = tensors[f"adam.m.{key}"].astype(p.data.dtype)
            slot.v = tensors[f"adam.v.{key}"].astype(p.data.dtype)
            slot.t = int(tensors[f"adam.t.{key}"][0])
            self.slots[i] = slot


def adam_step(optimizer: Adam, lr: float | None = None) -> None:
    """Functional alias for ``optimizer.step(lr)``."""
    optimizer.step(lr)
