"""Horizontal flip and random resized crop for ``[B, C, H, W]`` batches."""

from __future__ import annotations

import math

import numpy as np

from . import kernels

LOG_RATIO = (math.log(3.0 / 4.0), math.log(4.0 / 3.0))


def crop_boxes(batch: int, height: int, width: int, min_ratio: float, rng: np.random.Generator) -> np.ndarray:
    """Random crop boxes ``[B, 4]`` as (top, left, h, w).

    The crop keeps an area fraction in [min_ratio, 1] with aspect ratio in
    [3/4, 4/3], clipped to the image. Draws: area fractions (B), log aspect
    ratios (B), tops (B), lefts (B).
    """
    scale = rng.uniform(min_ratio, 1.0, size=batch)
    log_r = rng.uniform(*LOG_RATIO, size=batch)
    area = scale * height * width
    ratio = np.exp(log_r)
    w = np.clip(np.round(np.sqrt(area * ratio)), 1, width).astype(np.int64)
    h = np.clip(np.round(np.sqrt(area / ratio)), 1, height).astype(np.int64)
    top = rng.integers(0, height - h + 1)
    left = rng.integers(0, width - w + 1)
    return np.stack([top, left, h, w], axis=1)


def augment_batch(images: np.ndarray, cfg, rng: np.random.Generator) -> np.ndarray:
    """Flip then random-resized-crop each image; output size ``cfg.crop_out_size`` (0 keeps H).

    Draw order: flip coins (B), then :func:`crop_boxes`.
    """
    x = np.asarray(images)
    if not cfg.enabled:
        return x
    b, _, h, w = x.shape
    out_size = cfg.crop_out_size or h
    flips = rng.random(b) < cfg.hflip_prob
    boxes = crop_boxes(b, h, w, cfg.crop_min_ratio, rng)
    out = np.empty((b, x.shape[1], out_size, out_size), dtype=x.dtype)
    for i in range(b):
        img = x[i, :, :, ::-1] if flips[i] else x[i]
        top, left, ch, cw = (int(v) for v in boxes[i])
        out[i] = kernels.crop_resize(np.ascontiguousarray(img), top, left, ch, cw, out_size)
    return out
