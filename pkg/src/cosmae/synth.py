"""Procedural multi-task image data for desk-scale runs.

Each task draws oriented sinusoidal gratings with its own orientation,
spatial-frequency band and colour palette, plus a soft blob, so that
consecutive tasks are clearly different distributions. The multi-label
evaluation set superposes the task gratings and a bright blob; an image's
labels are exactly the factors it contains, so an encoder that still
represents every task's structure ranks them best.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import kernels
from .errors import ConfigError, UsageError
from .io import EvalSpec, Manifest, TaskSpec, atomic_write_bytes, manifest_to_json, write_tensor


@dataclass(frozen=True)
class SynthPreset:
    n_tasks: int
    images_per_task: int
    val_per_task: int
    image_size: int
    channels: int
    eval_train: int
    eval_test: int
    n_labels: int = 5


PRESETS = {
    "desk": SynthPreset(n_tasks=4, images_per_task=512, val_per_task=64, image_size=32, channels=3,
                        eval_train=128, eval_test=128),
    "smoke": SynthPreset(n_tasks=2, images_per_task=128, val_per_task=32, image_size=16, channels=3,
                         eval_train=48, eval_test=48),
}

# (base orientation, frequency band in cycles per image, RGB palette)
_TASK_STYLES = [
    (0.0, (1.0, 2.5), (0.85, 0.35, 0.20)),
    (math.pi / 2, (4.0, 6.0), (0.20, 0.75, 0.35)),
    (math.pi / 4, (2.5, 4.0), (0.25, 0.35, 0.90)),
    (3 * math.pi / 4, (5.5, 8.0), (0.80, 0.75, 0.25)),
]


def _task_style(task: int):
    base_theta, band, color = _TASK_STYLES[task % len(_TASK_STYLES)]
    shift = (task // len(_TASK_STYLES)) * math.pi / 8
    return base_theta + shift, band, np.asarray(color)


def _coords(size: int):
    g = (np.arange(size) + 0.5) / size
    return np.meshgrid(g, g, indexing="ij")


def _grating(task: int, yy, xx, rng: np.random.Generator):
    """One task-styled grating ``[3, H, W]`` in [0, 1] and its tint."""
    theta0, (f_lo, f_hi), color = _task_style(task)
    theta = theta0 + rng.normal(0.0, 0.15)
    freq = rng.uniform(f_lo, f_hi)
    phase = rng.uniform(0, 2 * math.pi)
    wave = 0.5 + 0.5 * np.sin(2 * math.pi * freq * (xx * math.cos(theta) + yy * math.sin(theta)) + phase)
    tint = np.clip(color + rng.normal(0.0, 0.05, size=3), 0, 1)
    return tint[:, None, None] * wave[None], tint


def _blob(yy, xx, rng: np.random.Generator, width=(0.05, 0.15)):
    cy, cx = rng.uniform(0.2, 0.8, size=2)
    return np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * rng.uniform(*width) ** 2))


def _to_channels(img3: np.ndarray, channels: int) -> np.ndarray:
    return img3[np.arange(channels) % 3]


def task_images(task: int, n: int, size: int, channels: int, rng: np.random.Generator) -> np.ndarray:
    """``[n, C, size, size]`` float32 images in roughly [0, 1] for 0-based ``task``."""
    yy, xx = _coords(size)
    out = np.empty((n, channels, size, size), dtype=np.float32)
    for i in range(n):
        grating, tint = _grating(task, yy, xx, rng)
        blob = _blob(yy, xx, rng)
        img = 0.15 + 0.6 * grating + 0.25 * blob[None] * (1.0 - tint[:, None, None])
        img = img + rng.normal(0.0, 0.02, size=img.shape)
        out[i] = _to_channels(img, channels)
    return out


def eval_images(n: int, size: int, channels: int, n_labels: int, rng: np.random.Generator,
                n_task_styles: int = 4):
    """Multi-label images and their ``[n, n_labels]`` 0/1 labels (>= 1 positive per row).

    Labels ``0..n_task_styles-1`` mark the presence of the corresponding
    task's grating (superposed, each with its own palette); the last label
    marks a bright blob.
    """
    if n_labels != n_task_styles + 1:
        raise ConfigError(f"the synthetic evaluation set defines {n_task_styles + 1} factors, got {n_labels}")
    yy, xx = _coords(size)
    images = np.empty((n, channels, size, size), dtype=np.float32)
    labels = np.zeros((n, n_labels), dtype=np.float32)
    for i in range(n):
        present = rng.random(n_labels) < 0.4
        if not present[:n_task_styles].any():
            present[rng.integers(n_task_styles)] = True
        labels[i] = present
        img = np.full((3, size, size), 0.1)
        for t in np.flatnonzero(present[:n_task_styles]):
            img += 0.45 * _grating(int(t), yy, xx, rng)[0]
        if present[-1]:
            img += 0.5 * _blob(yy, xx, rng, width=(0.08, 0.12))[None]
        img += rng.normal(0.0, 0.02, size=img.shape)
        images[i] = _to_channels(img, channels)
    return images, labels


def knn_task_separability(a: np.ndarray, b: np.ndarray, k: int = 5) -> float:
    """Held-out accuracy of a raw-pixel k-NN telling images of ``a`` from ``b``.

    Even rows of each set are the reference, odd rows are classified by
    majority vote.
    """
    ref = np.concatenate([a[0::2], b[0::2]]).reshape(-1, int(np.prod(a.shape[1:])))
    ref_y = np.concatenate([np.zeros(len(a[0::2])), np.ones(len(b[0::2]))])
    qry = np.concatenate([a[1::2], b[1::2]]).reshape(-1, ref.shape[1])
    qry_y = np.concatenate([np.zeros(len(a[1::2])), np.ones(len(b[1::2]))])
    nbrs = kernels.knn_indices(qry, ref, k)
    pred = (ref_y[nbrs].mean(axis=1) > 0.5).astype(float)
    return float((pred == qry_y).mean())


def synth_tasks(preset: str | SynthPreset, seed: int, out_dir, force: bool = False,
                min_separability: float = 0.9) -> Manifest:
    """Write task and evaluation tensors plus ``manifest.json`` under ``out_dir``.

    Draw order: for each task, train images then validation images; then
    evaluation train and test sets.
    """
    if isinstance(preset, str):
        if preset not in PRESETS:
            raise ConfigError(f"unknown synth preset {preset!r}; choose from {sorted(PRESETS)}")
        preset = PRESETS[preset]
    out = Path(out_dir)
    if out.exists() and any(out.iterdir()) and not force:
        raise UsageError(f"output directory {out} is not empty (use --force to overwrite)")
    rng = np.random.default_rng(seed)
    p = preset
    tasks = []
    first = None
    for t in range(p.n_tasks):
        train = task_images(t, p.images_per_task, p.image_size, p.channels, rng)
        val = task_images(t, p.val_per_task, p.image_size, p.channels, rng)
        if t == 0:
            first = train
        elif t == 1:
            acc = knn_task_separability(first, train)
            if acc <= min_separability:
                raise ConfigError(f"tasks 1 and 2 are not separable enough (k-NN accuracy {acc:.3f})")
        write_tensor(out / f"task{t + 1}" / "train.f32t", train)
        write_tensor(out / f"task{t + 1}" / "val.f32t", val)
        tasks.append(TaskSpec(t + 1, f"task{t + 1}/train.f32t", f"task{t + 1}/val.f32t"))
    tr_x, tr_y = eval_images(p.eval_train, p.image_size, p.channels, p.n_labels, rng)
    te_x, te_y = eval_images(p.eval_test, p.image_size, p.channels, p.n_labels, rng)
    write_tensor(out / "eval" / "train_images.f32t", tr_x)
    write_tensor(out / "eval" / "train_labels.f32t", tr_y)
    write_tensor(out / "eval" / "test_images.f32t", te_x)
    write_tensor(out / "eval" / "test_labels.f32t", te_y)
    ev = EvalSpec("eval/train_images.f32t", "eval/train_labels.f32t",
                  "eval/test_images.f32t", "eval/test_labels.f32t")
    manifest = Manifest(tuple(tasks), ev, str(out))
    atomic_write_bytes(out / "manifest.json", manifest_to_json(manifest).encode("utf-8"))
    return manifest
