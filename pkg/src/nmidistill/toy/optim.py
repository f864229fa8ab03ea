"""AdamW with decoupled weight decay and a warmup + cosine learning-rate schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


@dataclass
class AdamWState:
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    weight_decay: float = 0.05
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def decays(name: str, value: np.ndarray) -> bool:
    """Weight decay applies to matrices only; biases, norm gains and position tables are exempt."""
    return value.ndim >= 2 and name != "pos_embed"


def adamw_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamWState,
               lr: float) -> dict[str, np.ndarray]:
    """One bias-corrected AdamW update. Returns new parameter arrays; ``state`` is updated in place."""
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    new = {}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        if g.shape != p.shape:
            raise ValueError(f"gradient for {name!r} has shape {g.shape}, parameter has {p.shape}")
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p)
            v = np.zeros_like(p)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        state.m[name], state.v[name] = m, v
        update = (m / c1) / (np.sqrt(v / c2) + state.eps)
        if state.weight_decay and decays(name, p):
            update = update + state.weight_decay * p
        new[name] = (p - lr * update).astype(p.dtype, copy=False)
    return new


@dataclass(frozen=True)
class Schedule:
    base_lr: float
    batch_size: int
    total_steps: int
    warmup_steps: int = 0

    @property
    def peak_lr(self) -> float:
        return self.base_lr * self.batch_size / 256


def lr_at(step: int, schedule: Schedule) -> float:
    """Linear warmup from 0 to the scaled peak, then cosine decay to 0 at ``total_steps``."""
    if step < 0:
        raise ValueError("step must be non-negative")
    peak = schedule.peak_lr
    if step >= schedule.total_steps:
        return 0.0
    if step < schedule.warmup_steps:
        return peak * step / schedule.warmup_steps
    span = schedule.total_steps - schedule.warmup_steps
    progress = (step - schedule.warmup_steps) / span
    return peak * 0.5 * (1.0 + math.cos(math.pi * progress))
