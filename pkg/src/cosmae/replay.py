"""Task-balanced replay memory and image mixup.

The buffer holds raw (un-augmented) images from earlier tasks, split as
evenly as possible between them: with capacity M and t tasks seen, each
task gets M // t slots and the M % t leftover slots go to the earliest
tasks. Mixing draws the interpolation weight from Beta(alpha, alpha),
U[0, 1] or a constant, depending on the configured mode.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, UsageError

LAMBDA_MODES = ("beta", "uniform", "constant")


@dataclass(frozen=True)
class MixupConfig:
    alpha: float = 0.4
    mode: str = "beta"
    constant: float = 0.5

    def __post_init__(self):
        validate_lambda_config(self.alpha, self.mode, self.constant)


def validate_lambda_config(alpha: float, mode: str, constant: float) -> None:
    if mode not in LAMBDA_MODES:
        raise ConfigError(f"lambda mode must be one of {LAMBDA_MODES}, got {mode!r}")
    if not alpha > 0:
        raise ConfigError(f"Beta concentration must be positive, got {alpha}")
    if not 0.0 <= constant <= 1.0:
        raise ConfigError(f"constant lambda must lie in [0, 1], got {constant}")


def sample_lambda(cfg, rng: np.random.Generator, size=None):
    """Interpolation weight(s) in [0, 1] according to ``cfg.mode``.

    ``cfg`` is anything with ``mode``, ``alpha`` and ``constant`` attributes
    (both :class:`MixupConfig` and the distillation config qualify). The
    constant mode consumes no random numbers.
    """
    if cfg.mode == "beta":
        return rng.beta(cfg.alpha, cfg.alpha, size=size)
    if cfg.mode == "uniform":
        return rng.random(size=size)
    if size is None:
        return float(cfg.constant)
    return np.full(size, float(cfg.constant))


def data_mixup(x_current, x_memory, lam):
    """``lam * x_current + (1 - lam) * x_memory``.

    ``lam`` may be a scalar or one weight per leading (batch) index.
    """
    a = np.asarray(x_current)
    b = np.asarray(x_memory)
    if a.shape != b.shape:
        raise UsageError(f"cannot mix images of shape {a.shape} and {b.shape}")
    lam = np.asarray(lam, dtype=np.float64)
    if np.any(lam < 0) or np.any(lam > 1):
        raise UsageError("mixup weight must lie in [0, 1]")
    if lam.ndim == 1:
        if lam.shape[0] != a.shape[0]:
            raise UsageError(f"{lam.shape[0]} mixup weights for a batch of {a.shape[0]}")
        lam = lam.reshape((-1,) + (1,) * (a.ndim - 1))
    elif lam.ndim > 1:
        raise UsageError("mixup weight must be a scalar or a 1-D array")
    out = lam * a + (1.0 - lam) * b
    return out.astype(np.result_type(a.dtype, b.dtype), copy=False)


@dataclass
class MemoryBuffer:
    capacity: int
    images: list = field(default_factory=list)
    task_ids: list = field(default_factory=list)

    def __post_init__(self):
        if self.capacity < 1:
            raise ConfigError(f"buffer capacity must be positive, got {self.capacity}")

    def __len__(self) -> int:
        return len(self.images)

    def counts(self) -> dict[int, int]:
        out: dict[int, int] = {}
        for t in self.task_ids:
            out[t] = out.get(t, 0) + 1
        return out

    def tasks(self) -> list[int]:
        return sorted(set(self.task_ids))

    def as_array(self) -> np.ndarray:
        return np.stack(self.images) if self.images else np.empty((0,))


def task_quotas(capacity: int, task_ids: list[int]) -> dict[int, int]:
    """Slots per task: ``capacity // t`` each, leftovers to the earliest ids."""
    ordered = sorted(task_ids)
    q, r = divmod(capacity, len(ordered))
    return {tid: q + (1 if i < r else 0) for i, tid in enumerate(ordered)}


def rebalance_insert(buffer: MemoryBuffer, task_images, task_id: int, rng: np.random.Generator) -> MemoryBuffer:
    """Shrink stored tasks to their new quota and add a sample of the new task.

    Draw order: one ``rng.choice`` without replacement per over-quota stored
    task (ascending id), then one for the new task. Kept images preserve
    their relative order. The buffer is updated in place and returned.
    """
    images = list(task_images) if not isinstance(task_images, np.ndarray) else task_images
    if len(images) == 0:
        raise UsageError("cannot insert an empty task into the memory buffer")
    if buffer.task_ids and task_id <= max(buffer.task_ids):
        raise UsageError(f"task id {task_id} must exceed stored ids (max {max(buffer.task_ids)})")

    quotas = task_quotas(buffer.capacity, buffer.tasks() + [task_id])
    new_images: list = []
    new_ids: list = []
    for tid in buffer.tasks():
        idx = [i for i, t in enumerate(buffer.task_ids) if t == tid]
        if len(idx) > quotas[tid]:
            keep = np.sort(rng.choice(len(idx), size=quotas[tid], replace=False))
            idx = [idx[k] for k in keep]
        new_images.extend(buffer.images[i] for i in idx)
        new_ids.extend([tid] * len(idx))

    n_new = min(quotas[task_id], len(images))
    chosen = np.sort(rng.choice(len(images), size=n_new, replace=False))
    new_images.extend(np.array(images[i], copy=True) for i in chosen)
    new_ids.extend([task_id] * n_new)

    buffer.images = new_images
    buffer.task_ids = new_ids
    return buffer


def sample_memory(buffer: MemoryBuffer, rng: np.random.Generator) -> np.ndarray:
    """One stored image, uniformly at random (one ``rng.integers`` draw)."""
    if len(buffer) == 0:
        raise UsageError("cannot sample from an empty memory buffer")
    return buffer.images[int(rng.integers(len(buffer)))]


def sample_memory_batch(buffer: MemoryBuffer, n: int, rng: np.random.Generator) -> np.ndarray:
    """``n`` images drawn uniformly with replacement, stacked ``[n, ...]``."""
    if len(buffer) == 0:
        raise UsageError("cannot sample from an empty memory buffer")
    idx = rng.integers(len(buffer), size=n)
    return np.stack([buffer.images[i] for i in idx])
