"""AdamW with decoupled weight decay and a cosine-annealing schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, RangeError, ShapeError
from .linalg import Matrix


@dataclass(frozen=True)
class Schedule:
    base_lr: float = 2e-4
    total_steps: int = 200

    def __post_init__(self):
        if self.base_lr < 0:
            raise ConfigError(f"base_lr must be non-negative, got {self.base_lr}")
        if self.total_steps < 1:
            raise ConfigError(f"total_steps must be positive, got {self.total_steps}")


def cosine_lr(step: int, schedule: Schedule) -> float:
    if not 0 <= step <= schedule.total_steps:
        raise RangeError(f"step {step} outside [0, {schedule.total_steps}]")
    return schedule.base_lr * 0.5 * (1 + math.cos(math.pi * step / schedule.total_steps))


@dataclass
class OptimizerState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    step: int = 0
    exp_avg: dict[str, Matrix] = field(default_factory=dict)
    exp_avg_sq: dict[str, Matrix] = field(default_factory=dict)


def adamw_step(params: dict[str, Matrix], grads: dict[str, Matrix], state: OptimizerState,
               lr: float) -> dict[str, Matrix]:
    """One AdamW update; returns new arrays and advances ``state`` in place.

    Parameters without a gradient entry are passed through untouched.
    """
    state.step += 1
    t = state.step
    bc1 = 1 - state.beta1 ** t
    bc2 = 1 - state.beta2 ** t
    out = dict(params)
    for name, g in grads.items():
        p = params[name]
        if g.shape != p.shape:
            raise ShapeError(f"{name}: gradient {g.shape} vs parameter {p.shape}")
        m = state.exp_avg.get(name)
        v = state.exp_avg_sq.get(name)
        if m is None:
            m = np.zeros_like(p)
            v = np.zeros_like(p)
        elif m.shape != p.shape:
            raise ShapeError(f"{name}: optimizer moment {m.shape} vs parameter {p.shape}")
        m = state.beta1 * m + (1 - state.beta1) * g
        v = state.beta2 * v + (1 - state.beta2) * (g * g)
        state.exp_avg[name] = m
        state.exp_avg_sq[name] = v
        if lr == 0:
            continue
        decayed = p * (1 - lr * state.weight_decay) if state.weight_decay else p
        denom = np.sqrt(v / bc2) + state.eps
        out[name] = (decayed - lr * (m / bc1) / denom).astype(p.dtype, copy=False)
    return out
