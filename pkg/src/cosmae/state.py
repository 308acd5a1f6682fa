"""Mutable training state carried from task to task."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .config import RunConfig
from .distill import Projector
from .mae import MAEModel
from .replay import MemoryBuffer
from .tensor_nn.optim import OptimizerState
from .tensor_nn.params import ParamSet


@dataclass
class Counters:
    steps: int = 0
    buffer_reads: int = 0
    teacher_builds: int = 0


@dataclass
class TrainState:
    config: RunConfig
    model: MAEModel
    projector: Projector
    buffer: MemoryBuffer
    optimizer: OptimizerState
    rng: np.random.Generator
    prev_encoder: ParamSet | None = None
    task_index: int = 0      # number of completed tasks
    active_task: int = 0     # id of a partially trained task, 0 when none
    epoch: int = 0           # completed epochs of the active task
    task_step: int = 0       # optimizer steps taken in the active task
    counters: Counters = field(default_factory=Counters)

    @classmethod
    def initial(cls, config: RunConfig, seed: int | None = None) -> "TrainState":
        """Fresh state. Draw order: MAE parameters, then projector parameters."""
        rng = np.random.default_rng(config.seed if seed is None else seed)
        model = MAEModel.create(config.model, rng)
        projector = Projector.create(
            config.model.enc_dim, config.distill.projector_hidden, rng, config.model.np_dtype
        )
        o = config.optim
        optimizer = OptimizerState(o.lr, o.beta1, o.beta2, o.eps, o.weight_decay)
        return cls(config, model, projector, MemoryBuffer(config.buffer.capacity), optimizer, rng)

    def trainable(self) -> ParamSet:
        """Model and projector parameters in one set (tensors shared)."""
        ps = ParamSet()
        for src in (self.model.params, self.projector.params):
            for name, t in src.items():
                ps._entries[name] = t
        return ps
