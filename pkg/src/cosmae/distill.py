"""Model-mixup knowledge distillation.

A frozen teacher encoder is built each step by interpolating the live
encoder weights with the snapshot taken after the previous task. Student
features (mean-pooled patch tokens) go through a small trainable projector
and are aligned with the teacher features by a symmetric temperature-scaled
cross-entropy over the batch.

The default ``denominator="literal"`` sums only over the *other* batch
elements (q != i), so the positive pair is absent from the denominator and
the loss can be negative. ``"ntxent"`` keeps the positive pair in, as in
the usual NT-Xent.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, NumericError, UsageError
from .mae import MAEModel, encode, pooled_features
from .replay import sample_lambda, validate_lambda_config
from .tensor_nn import autograd as ag
from .tensor_nn.autograd import Tensor
from .tensor_nn.layers import init_linear, linear
from .tensor_nn.params import ParamSet


@dataclass(frozen=True)
class DistillConfig:
    alpha: float = 0.4
    mode: str = "beta"
    constant: float = 0.5
    tau: float = 0.5
    beta_weight: float = 0.1
    projector_hidden: int = 128
    denominator: str = "literal"
    student_pass: str = "masked"

    def __post_init__(self):
        validate_lambda_config(self.alpha, self.mode, self.constant)
        if not self.tau > 0:
            raise ConfigError(f"temperature must be positive, got {self.tau}")
        if not self.beta_weight >= 0:
            raise ConfigError(f"distillation weight must be non-negative, got {self.beta_weight}")
        if self.projector_hidden < 1:
            raise ConfigError("projector_hidden must be positive")
        if self.denominator not in ("literal", "ntxent"):
            raise ConfigError(f"denominator must be 'literal' or 'ntxent', got {self.denominator!r}")
        if self.student_pass not in ("masked", "unmasked"):
            raise ConfigError(f"student_pass must be 'masked' or 'unmasked', got {self.student_pass!r}")


class Projector:
    """Two affine layers with a ReLU in between: enc_dim -> hidden -> enc_dim."""

    def __init__(self, params: ParamSet):
        self.params = params

    @classmethod
    def create(cls, dim: int, hidden: int, rng: np.random.Generator, dtype=np.float32) -> "Projector":
        ps = ParamSet()
        init_linear(ps, "projector.fc1", dim, hidden, rng, dtype)
        init_linear(ps, "projector.fc2", hidden, dim, rng, dtype)
        return cls(ps)


def project(proj: Projector, c: Tensor) -> Tensor:
    ps = proj.params
    if c.shape[-1] != ps["projector.fc1.weight"].shape[0]:
        raise ConfigError(f"projector expects width {ps['projector.fc1.weight'].shape[0]}, got {c.shape[-1]}")
    return linear(ag.relu(linear(c, ps, "projector.fc1")), ps, "projector.fc2")


def interpolate_weights(theta_cur: ParamSet, theta_prev: ParamSet, lam2: float) -> ParamSet:
    """Frozen ``lam2 * theta_cur + (1 - lam2) * theta_prev``, entry by entry.

    The endpoints return exact copies, so lam2 = 1 reproduces the current
    weights bit for bit.
    """
    theta_cur.require_compatible(theta_prev, "current and previous encoders")
    lam2 = float(lam2)
    if not 0.0 <= lam2 <= 1.0:
        raise UsageError(f"interpolation weight must lie in [0, 1], got {lam2}")
    if lam2 == 1.0:
        return theta_cur.copy(frozen=True)
    if lam2 == 0.0:
        return theta_prev.copy(frozen=True)
    out = ParamSet()
    for name, cur in theta_cur.items():
        prev = theta_prev[name].data
        mixed = lam2 * cur.data.astype(np.float64) + (1.0 - lam2) * prev.astype(np.float64)
        out.add(name, Tensor(mixed.astype(cur.dtype), requires_grad=False))
    return out


def teacher_features(model: MAEModel, theta_mixed: ParamSet, images) -> Tensor:
    """Pooled unmasked-encoder features under frozen weights; no graph is built."""
    for name, t in theta_mixed.items():
        if t.requires_grad:
            raise UsageError(f"teacher weight {name} is trainable; teachers must be frozen")
    feats = pooled_features(encode(model, images, None, params=theta_mixed))
    assert not feats.requires_grad
    return feats


def mim_loss(student_proj: Tensor, teacher, tau: float, denominator: str = "literal") -> Tensor:
    """Symmetric cosine-similarity cross-entropy between two ``[B, D]`` batches.

    For each i, the term comparing student i with teacher i is normalised by
    the student-vs-other-teachers similarities and, symmetrically, by the
    teacher-vs-other-students similarities; the two are averaged over 2B.
    """
    teacher = teacher if isinstance(teacher, Tensor) else Tensor(np.asarray(teacher))
    if student_proj.ndim != 2 or student_proj.shape != teacher.shape:
        raise UsageError(f"mim_loss needs equal [B, D] inputs, got {student_proj.shape} and {teacher.shape}")
    b = student_proj.shape[0]
    if b < 2:
        raise UsageError("mim_loss needs a batch of at least 2")
    if not tau > 0:
        raise UsageError("temperature must be positive")
    zs = ag.l2_normalize(student_proj)
    zt = ag.l2_normalize(teacher)
    sim = ag.matmul(zs, zt.transpose(1, 0)) * (1.0 / tau)
    pos = (zs * zt).sum(axis=-1) * (1.0 / tau)
    if denominator == "literal":
        where = ~np.eye(b, dtype=bool)
    elif denominator == "ntxent":
        where = None
    else:
        raise ConfigError(f"unknown denominator {denominator!r}")
    rows = ag.logsumexp(sim, where)
    cols = ag.logsumexp(sim.transpose(1, 0), where)
    return (rows + cols - pos * 2.0).sum() * (1.0 / (2 * b))


def total_loss(recon: Tensor, mim: Tensor, beta_weight: float) -> Tensor:
    """``recon + beta_weight * mim``; raises on non-finite inputs."""
    for what, t in (("reconstruction loss", recon), ("distillation loss", mim)):
        value = t.data if isinstance(t, Tensor) else np.asarray(t)
        if not np.all(np.isfinite(value)):
            raise NumericError(f"non-finite {what}")
    if not isinstance(recon, Tensor):
        recon = Tensor(np.asarray(recon, dtype=np.float64))
    if beta_weight == 0:
        return recon
    return recon + ag.mul(mim if isinstance(mim, Tensor) else Tensor(np.asarray(mim)), float(beta_weight))


def draw_teacher(theta_cur: ParamSet, theta_prev: ParamSet, cfg: DistillConfig, rng: np.random.Generator):
    """Draw lambda_2 (one draw unless the mode is constant) and build the teacher."""
    lam2 = float(sample_lambda(cfg, rng))
    return interpolate_weights(theta_cur, theta_prev, lam2), lam2
