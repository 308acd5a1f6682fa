"""Frozen-encoder evaluation: feature extraction, ML-kNN and micro mAP.

ML-kNN follows Zhang & Zhou (2007): label priors and, per label, the
likelihood of seeing exactly c positive neighbours among k given that the
label is present or absent, both Laplace-smoothed with ``s``. Neighbours are
found by Euclidean distance on raw features, ties resolved toward the lower
training index, and every training point is excluded from its own
neighbourhood while fitting.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import ConfigError, UsageError
from .mae import MAEModel, encode, pooled_features
from .tensor_nn.autograd import no_grad


def extract_features(model: MAEModel, images, params=None, batch_size: int = 128) -> np.ndarray:
    """Unmasked encoder pass, mean over patch tokens: ``[N, enc_dim]`` float64."""
    x = np.asarray(images)
    if x.ndim == 3:
        x = x[None]
    out = []
    with no_grad():
        for lo in range(0, len(x), batch_size):
            out.append(pooled_features(encode(model, x[lo:lo + batch_size], None, params=params)).data)
    return np.concatenate(out, axis=0).astype(np.float64) if out else np.empty((0, model.config.enc_dim))


@dataclass
class MLKNN:
    k: int
    smoothing: float
    features: np.ndarray
    labels: np.ndarray
    prior_pos: np.ndarray       # [L]
    like_pos: np.ndarray        # [L, k+1]  P(c neighbours positive | label present)
    like_neg: np.ndarray        # [L, k+1]  P(c neighbours positive | label absent)


def mlknn_fit(features, labels, k: int = 10, smoothing: float = 1.0) -> MLKNN:
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels).astype(np.int64)
    n, n_labels = y.shape
    if x.shape[0] != n:
        raise ConfigError(f"{x.shape[0]} feature rows but {n} label rows")
    if not 1 <= k < n:
        raise ConfigError(f"k must satisfy 1 <= k < N_train ({n}), got {k}")
    if not smoothing > 0:
        raise ConfigError("smoothing must be positive")
    if np.any((y != 0) & (y != 1)):
        raise ConfigError("labels must be binary")
    s = float(smoothing)
    prior = (s + y.sum(axis=0)) / (2 * s + n)

    nbrs = kernels.knn_indices(x, x, k, exclude_self=True)
    counts = y[nbrs].sum(axis=1)  # [N, L] positive neighbours per label
    c_pos = np.zeros((n_labels, k + 1))
    c_neg = np.zeros((n_labels, k + 1))
    for j in range(n_labels):
        c_pos[j] = np.bincount(counts[y[:, j] == 1, j], minlength=k + 1)
        c_neg[j] = np.bincount(counts[y[:, j] == 0, j], minlength=k + 1)
    like_pos = (s + c_pos) / (s * (k + 1) + c_pos.sum(axis=1, keepdims=True))
    like_neg = (s + c_neg) / (s * (k + 1) + c_neg.sum(axis=1, keepdims=True))
    return MLKNN(k, s, x, y, prior, like_pos, like_neg)


def mlknn_predict(model: MLKNN, features) -> np.ndarray:
    """Posterior P(label present | neighbour count): ``[N_test, L]`` in (0, 1)."""
    q = np.asarray(features, dtype=np.float64)
    if q.ndim != 2 or q.shape[1] != model.features.shape[1]:
        raise ConfigError(f"test features {q.shape} do not match training width {model.features.shape[1]}")
    nbrs = kernels.knn_indices(q, model.features, model.k, exclude_self=False)
    counts = model.labels[nbrs].sum(axis=1)
    cols = np.arange(model.labels.shape[1])[None, :]
    p1 = model.prior_pos[None, :] * model.like_pos[cols, counts]
    p0 = (1.0 - model.prior_pos[None, :]) * model.like_neg[cols, counts]
    return p1 / (p1 + p0)


def average_precision(relevance, scores) -> float:
    """AP of one ranked list; ties in score keep the original order."""
    rel = np.asarray(relevance).ravel().astype(bool)
    sc = np.asarray(scores, dtype=np.float64).ravel()
    if rel.shape != sc.shape:
        raise UsageError("relevance and scores differ in length")
    n_pos = int(rel.sum())
    if n_pos == 0:
        raise UsageError("average precision is undefined without positives")
    order = np.argsort(-sc, kind="stable")
    hits = rel[order]
    ranks = np.flatnonzero(hits) + 1
    return float(np.mean(np.arange(1, n_pos + 1) / ranks))


def micro_map(scores, labels) -> float:
    """AP over the pooled list of every (sample, label) pair."""
    sc = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if sc.shape != y.shape:
        raise UsageError(f"scores {sc.shape} and labels {y.shape} differ in shape")
    if not np.all(np.isfinite(sc)):
        raise UsageError("scores must be finite")
    return average_precision(y.ravel(), sc.ravel())


def macro_map(scores, labels) -> float:
    """Mean per-label AP over labels with at least one positive."""
    sc = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    aps = [average_precision(y[:, j], sc[:, j]) for j in range(y.shape[1]) if y[:, j].any()]
    if not aps:
        raise UsageError("no label has a positive example")
    return float(np.mean(aps))


def evaluate_encoder(model: MAEModel, train_images, train_labels, test_images, test_labels,
                     k: int = 10, smoothing: float = 1.0) -> dict:
    f_train = extract_features(model, train_images)
    f_test = extract_features(model, test_images)
    knn = mlknn_fit(f_train, train_labels, k=k, smoothing=smoothing)
    scores = mlknn_predict(knn, f_test)
    return {
        "micro_map": micro_map(scores, test_labels),
        "macro_map": macro_map(scores, test_labels),
    }
