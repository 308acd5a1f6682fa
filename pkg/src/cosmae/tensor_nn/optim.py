"""AdamW with decoupled weight decay and a linear-warmup + cosine schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from ..errors import ConfigError, UsageError
from .params import ParamSet


@dataclass
class OptimizerState:
    lr_base: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.05
    step_count: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def reset(self) -> None:
        self.step_count = 0
        self.m.clear()
        self.v.clear()

    def hyperparameters(self) -> tuple[float, float, float, float, float]:
        return (self.lr_base, self.beta1, self.beta2, self.eps, self.weight_decay)


def _decays(array: np.ndarray) -> bool:
    # norms, biases and 1-D tokens are excluded from weight decay
    return array.ndim >= 2


def adamw_step(params: ParamSet, grads: Mapping[str, np.ndarray] | None, state: OptimizerState, lr: float) -> None:
    """One in-place AdamW update of the trainable entries of ``params``.

    ``grads`` maps parameter names to gradient arrays; ``None`` reads each
    tensor's ``.grad``. Entries without a gradient are skipped entirely (no
    moment update, no weight decay), as are frozen entries.
    """
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t
    for name, p in params.trainable():
        g = p.grad if grads is None else grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise ConfigError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        elif m.shape != p.shape:
            raise ConfigError(f"optimizer moment for {name} has shape {m.shape}, parameter {p.shape}")
        v = state.v[name]
        g = g.astype(p.dtype, copy=False)
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        update = (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        if state.weight_decay and _decays(p.data):
            update = update + state.weight_decay * p.data
        p.data -= (lr * update).astype(p.dtype, copy=False)


@dataclass(frozen=True)
class ScheduleConfig:
    lr_base: float
    warmup_epochs: int
    total_epochs: int
    steps_per_epoch: int

    def __post_init__(self):
        if not 0 <= self.warmup_epochs < self.total_epochs:
            raise ConfigError(
                f"need 0 <= warmup_epochs < total_epochs, got {self.warmup_epochs} and {self.total_epochs}"
            )
        if self.steps_per_epoch < 1:
            raise ConfigError("steps_per_epoch must be positive")

    @property
    def warmup_steps(self) -> int:
        return self.warmup_epochs * self.steps_per_epoch

    @property
    def total_steps(self) -> int:
        return self.total_epochs * self.steps_per_epoch


def lr_at(step: int, cfg: ScheduleConfig) -> float:
    """Learning rate for 0-based ``step``.

    Warmup ramps linearly from lr_base/warmup_steps (step 0) to lr_base at
    step warmup_steps - 1; afterwards a half cosine decays from lr_base
    toward zero over the remaining steps.
    """
    if not 0 <= step < cfg.total_steps:
        raise UsageError(f"step {step} outside schedule [0, {cfg.total_steps})")
    w = cfg.warmup_steps
    if step < w:
        return cfg.lr_base * (step + 1) / w
    progress = (step - w) / (cfg.total_steps - w)
    return cfg.lr_base * 0.5 * (1.0 + math.cos(math.pi * progress))
