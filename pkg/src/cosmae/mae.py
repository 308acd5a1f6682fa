"""Masked autoencoder: patching, random masks, encoder/decoder, masked MSE.

Images are ``[C, H, W]`` (or batched ``[B, C, H, W]``) float arrays. A patch
is flattened in (row, column, channel) order and patches are numbered
row-major from the top-left corner.

The reconstruction loss is the per-patch *squared Euclidean norm* averaged
over masked patches only, not a per-pixel mean; it is larger than the usual
MAE loss by a factor of ``patch_size**2 * channels``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from .errors import ConfigError, UsageError
from .tensor_nn import autograd as ag
from .tensor_nn.autograd import Tensor
from .tensor_nn.layers import (
    init_layer_norm,
    init_linear,
    init_transformer_block,
    layer_norm,
    linear,
    sincos_pos_embed,
    transformer_block_forward,
)
from .tensor_nn.params import ParamSet


@dataclass(frozen=True)
class MAEConfig:
    image_size: int = 32
    channels: int = 3
    patch_size: int = 8
    enc_depth: int = 2
    enc_heads: int = 4
    enc_dim: int = 64
    dec_depth: int = 1
    dec_heads: int = 4
    dec_dim: int = 32
    mask_ratio: float = 0.75
    pos_embed: str = "sincos"
    norm_pix_loss: bool = False
    dtype: str = "float32"

    def __post_init__(self):
        if self.image_size <= 0 or self.patch_size <= 0 or self.image_size % self.patch_size:
            raise ConfigError(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if self.channels <= 0:
            raise ConfigError("channels must be positive")
        for dim, heads, what in ((self.enc_dim, self.enc_heads, "enc"), (self.dec_dim, self.dec_heads, "dec")):
            if dim <= 0 or heads <= 0 or dim % heads:
                raise ConfigError(f"{what}_dim {dim} not divisible by {what}_heads {heads}")
        if self.enc_depth < 1 or self.dec_depth < 1:
            raise ConfigError("encoder and decoder need at least one block")
        if not 0.0 < self.mask_ratio < 1.0:
            raise ConfigError(f"mask_ratio must lie in (0, 1), got {self.mask_ratio}")
        if self.pos_embed not in ("sincos", "learned"):
            raise ConfigError(f"pos_embed must be 'sincos' or 'learned', got {self.pos_embed!r}")
        if self.pos_embed == "sincos" and (self.enc_dim % 4 or self.dec_dim % 4):
            raise ConfigError("sincos positional embeddings need enc_dim and dec_dim divisible by 4")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def n_patches(self) -> int:
        return self.grid ** 2

    @property
    def patch_dim(self) -> int:
        return self.patch_size ** 2 * self.channels

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    def to_dict(self) -> dict:
        return asdict(self)


LARGE_MAE = MAEConfig(
    image_size=224, channels=3, patch_size=16, enc_depth=12, enc_heads=12, enc_dim=768,
    dec_depth=8, dec_heads=16, dec_dim=512, mask_ratio=0.75,
)
DESK_MAE = MAEConfig()


# ---------------------------------------------------------------------------
# patches and masks
# ---------------------------------------------------------------------------


def patchify(images: np.ndarray, patch_size: int) -> np.ndarray:
    """``[C,H,W] -> [n, p*p*C]`` (or batched ``[B,C,H,W] -> [B, n, p*p*C]``)."""
    x = np.asarray(images)
    single = x.ndim == 3
    if single:
        x = x[None]
    if x.ndim != 4:
        raise ConfigError(f"patchify expects [C,H,W] or [B,C,H,W], got shape {x.shape}")
    b, c, h, w = x.shape
    p = patch_size
    if h % p or w % p:
        raise ConfigError(f"image {h}x{w} not divisible by patch size {p}")
    gh, gw = h // p, w // p
    out = x.reshape(b, c, gh, p, gw, p).transpose(0, 2, 4, 3, 5, 1).reshape(b, gh * gw, p * p * c)
    return out[0] if single else out


def unpatchify(patches: np.ndarray, patch_size: int, channels: int) -> np.ndarray:
    x = np.asarray(patches)
    single = x.ndim == 2
    if single:
        x = x[None]
    b, n, d = x.shape
    p = patch_size
    g = int(round(np.sqrt(n)))
    if g * g != n or d != p * p * channels:
        raise ConfigError(f"cannot unpatchify {x.shape} with patch {p} and {channels} channels")
    out = x.reshape(b, g, g, p, p, channels).transpose(0, 5, 1, 3, 2, 4).reshape(b, channels, g * p, g * p)
    return out[0] if single else out


@dataclass(frozen=True)
class MaskPlan:
    n_patches: int
    masked: np.ndarray
    visible: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.masked, dtype=np.int64)
        v = np.asarray(self.visible, dtype=np.int64)
        object.__setattr__(self, "masked", m)
        object.__setattr__(self, "visible", v)
        both = np.concatenate([m, v])
        if len(both) != self.n_patches or not np.array_equal(np.sort(both), np.arange(self.n_patches)):
            raise UsageError("masked and visible indices must partition 0..n_patches-1")
        if len(v) == 0:
            raise UsageError("a mask plan needs at least one visible patch")

    @property
    def n_masked(self) -> int:
        return len(self.masked)

    @classmethod
    def from_masked(cls, n_patches: int, masked) -> "MaskPlan":
        masked = np.sort(np.asarray(masked, dtype=np.int64))
        visible = np.setdiff1d(np.arange(n_patches), masked)
        return cls(n_patches, masked, visible)

    @classmethod
    def none_masked(cls, n_patches: int) -> "MaskPlan":
        return cls(n_patches, np.empty(0, dtype=np.int64), np.arange(n_patches))


def n_masked_for(n_patches: int, ratio: float) -> int:
    # Python's round() is ties-to-even
    n_r = int(round(ratio * n_patches))
    if n_r <= 0 or n_r >= n_patches:
        raise ConfigError(f"mask ratio {ratio} on {n_patches} patches gives a degenerate mask ({n_r} masked)")
    return n_r


def sample_mask(n_patches: int, ratio: float, rng: np.random.Generator) -> MaskPlan:
    """Uniformly random subset of round(ratio * n_patches) masked patches.

    Consumes one ``rng.random(n_patches)`` draw; the masked set is the
    indices of the smallest N_r noise values.
    """
    if not 0.0 < ratio < 1.0:
        raise ConfigError(f"mask ratio must lie in (0, 1), got {ratio}")
    if n_patches < 2:
        raise ConfigError("need at least two patches to mask")
    n_r = n_masked_for(n_patches, ratio)
    order = np.argsort(rng.random(n_patches), kind="stable")
    return MaskPlan(n_patches, np.sort(order[:n_r]), np.sort(order[n_r:]))


def sample_masks(batch: int, n_patches: int, ratio: float, rng: np.random.Generator) -> list[MaskPlan]:
    """One independent plan per image, drawn in batch order."""
    return [sample_mask(n_patches, ratio, rng) for _ in range(batch)]


def _plan_indices(plans: Sequence[MaskPlan], n_patches: int) -> tuple[np.ndarray, np.ndarray]:
    if not plans:
        raise UsageError("empty list of mask plans")
    sizes = {p.n_masked for p in plans}
    if len(sizes) != 1:
        raise UsageError(f"mask plans in a batch must mask the same number of patches, got {sorted(sizes)}")
    for p in plans:
        if p.n_patches != n_patches:
            raise UsageError(f"mask plan covers {p.n_patches} patches, model has {n_patches}")
    return np.stack([p.visible for p in plans]), np.stack([p.masked for p in plans])


# ---------------------------------------------------------------------------
# model
# ---------------------------------------------------------------------------


class MAEModel:
    """Encoder ``encoder.*`` and decoder ``decoder.*`` parameters plus config."""

    def __init__(self, config: MAEConfig, params: ParamSet):
        self.config = config
        self.params = params
        dt = config.np_dtype
        if config.pos_embed == "sincos":
            enc = np.zeros((config.n_patches + 1, config.enc_dim))
            enc[1:] = sincos_pos_embed(config.n_patches, config.enc_dim)
            dec = np.zeros((config.n_patches + 1, config.dec_dim))
            dec[1:] = sincos_pos_embed(config.n_patches, config.dec_dim)
            self._fixed_pos = {"encoder": Tensor(enc.astype(dt)), "decoder": Tensor(dec.astype(dt))}
        else:
            self._fixed_pos = {}

    @classmethod
    def create(cls, config: MAEConfig, rng: np.random.Generator) -> "MAEModel":
        """Initialise all parameters, drawing from ``rng`` in name order."""
        dt = config.np_dtype
        ps = ParamSet()
        n, d, dd = config.n_patches, config.enc_dim, config.dec_dim
        init_linear(ps, "encoder.patch_embed", config.patch_dim, d, rng, dt)
        ps.add("encoder.cls_token", Tensor(rng.normal(0, 0.02, (1, d)).astype(dt), requires_grad=True))
        if config.pos_embed == "learned":
            ps.add("encoder.pos_embed", Tensor(rng.normal(0, 0.02, (n + 1, d)).astype(dt), requires_grad=True))
        for i in range(config.enc_depth):
            init_transformer_block(ps, f"encoder.block{i}", d, rng, dt)
        init_layer_norm(ps, "encoder.norm", d, dt)
        init_linear(ps, "decoder.embed", d, dd, rng, dt)
        ps.add("decoder.mask_token", Tensor(rng.normal(0, 0.02, (1, dd)).astype(dt), requires_grad=True))
        if config.pos_embed == "learned":
            ps.add("decoder.pos_embed", Tensor(rng.normal(0, 0.02, (n + 1, dd)).astype(dt), requires_grad=True))
        for i in range(config.dec_depth):
            init_transformer_block(ps, f"decoder.block{i}", dd, rng, dt)
        init_layer_norm(ps, "decoder.norm", dd, dt)
        init_linear(ps, "decoder.pred", dd, config.patch_dim, rng, dt)
        return cls(config, ps)

    def encoder_params(self) -> ParamSet:
        return self.params.subset("encoder.")

    def decoder_params(self) -> ParamSet:
        return self.params.subset("decoder.")

    def pos_embed(self, part: str, params=None) -> Tensor:
        if self.config.pos_embed == "sincos":
            return self._fixed_pos[part]
        return (params if params is not None else self.params)[f"{part}.pos_embed"]


def _as_batch(images) -> tuple[np.ndarray, bool]:
    x = images.data if isinstance(images, Tensor) else np.asarray(images)
    single = x.ndim == 3
    return (x[None] if single else x), single


def encode(model: MAEModel, images, plans: Sequence[MaskPlan] | MaskPlan | None = None, params=None) -> Tensor:
    """Run the encoder on visible patches (or all patches when ``plans`` is None).

    Returns ``[B, 1 + n_tokens, enc_dim]`` with the class token first, or
    ``[1 + n_tokens, enc_dim]`` for a single ``[C,H,W]`` image. ``params``
    may be any ParamSet holding the ``encoder.*`` entries, e.g. a frozen
    interpolated teacher.
    """
    cfg = model.config
    ps = params if params is not None else model.params
    x, single = _as_batch(images)
    if x.shape[1:] != (cfg.channels, cfg.image_size, cfg.image_size):
        raise ConfigError(f"image shape {x.shape[1:]} does not match model config")
    if isinstance(plans, MaskPlan):
        plans = [plans]
    b = x.shape[0]
    patches = patchify(x.astype(cfg.np_dtype, copy=False), cfg.patch_size)
    pos = model.pos_embed("encoder", ps)
    pos_patches = pos[1:]
    if plans is not None:
        if len(plans) != b:
            raise UsageError(f"{len(plans)} mask plans for a batch of {b} images")
        visible, _ = _plan_indices(plans, cfg.n_patches)
        patches = patches[np.arange(b)[:, None], visible]
        tok = linear(Tensor(patches), ps, "encoder.patch_embed")
        tok = tok + ag.take_tokens(ag.broadcast_to(pos_patches, (b, cfg.n_patches, cfg.enc_dim)), visible)
    else:
        tok = linear(Tensor(patches), ps, "encoder.patch_embed") + pos_patches
    cls = ps["encoder.cls_token"] + pos[0:1]
    h = ag.concat([ag.broadcast_to(cls.reshape(1, 1, cfg.enc_dim), (b, 1, cfg.enc_dim)), tok], axis=1)
    for i in range(cfg.enc_depth):
        h = transformer_block_forward(h, ps, f"encoder.block{i}", cfg.enc_heads)
    h = layer_norm(h, ps, "encoder.norm")
    return h.reshape(h.shape[1:]) if single else h


def decode_and_reconstruct(model: MAEModel, enc_out: Tensor, plans: Sequence[MaskPlan] | MaskPlan) -> Tensor:
    """Predict every patch: ``[B, n_patches, patch_dim]``.

    Mask tokens are placed at the masked positions, positional embeddings are
    added, the decoder blocks run over class token + full grid, and the
    class token is dropped before the output head.
    """
    cfg = model.config
    ps = model.params
    single = enc_out.ndim == 2
    if single:
        enc_out = enc_out.reshape(1, *enc_out.shape)
    if isinstance(plans, MaskPlan):
        plans = [plans]
    b = enc_out.shape[0]
    if len(plans) != b:
        raise UsageError(f"{len(plans)} mask plans for {b} encoded images")
    visible, masked = _plan_indices(plans, cfg.n_patches)
    if enc_out.shape[1] != 1 + visible.shape[1]:
        raise UsageError(
            f"encoder output has {enc_out.shape[1]} tokens but the plans leave {visible.shape[1]} patches visible"
        )
    dd = cfg.dec_dim
    x = linear(enc_out, ps, "decoder.embed")
    cls, vis_tok = x[:, :1], x[:, 1:]
    if masked.shape[1]:
        mask_tok = ag.broadcast_to(ps["decoder.mask_token"].reshape(1, 1, dd), (b, masked.shape[1], dd))
        seq = ag.concat([vis_tok, mask_tok], axis=1)
    else:
        seq = vis_tok
    restore = np.argsort(np.concatenate([visible, masked], axis=1), axis=1, kind="stable")
    grid = ag.take_tokens(seq, restore)
    h = ag.concat([cls, grid], axis=1) + model.pos_embed("decoder")
    for i in range(cfg.dec_depth):
        h = transformer_block_forward(h, ps, f"decoder.block{i}", cfg.dec_heads)
    h = layer_norm(h, ps, "decoder.norm")
    out = linear(h[:, 1:], ps, "decoder.pred")
    return out.reshape(out.shape[1:]) if single else out


def _normalise_targets(patches: np.ndarray) -> np.ndarray:
    mu = patches.mean(axis=-1, keepdims=True)
    var = patches.var(axis=-1, keepdims=True)
    return (patches - mu) / np.sqrt(var + 1e-6)


def recon_loss(patches, recon: Tensor, plans: Sequence[MaskPlan] | MaskPlan, norm_pix: bool = False) -> Tensor:
    """Mean over masked patches of the squared L2 error per patch.

    With a batch, the per-image losses are averaged.
    """
    target = patches.data if isinstance(patches, Tensor) else np.asarray(patches)
    if isinstance(plans, MaskPlan):
        plans = [plans]
    if target.shape != recon.shape:
        raise UsageError(f"target shape {target.shape} != reconstruction shape {recon.shape}")
    if recon.ndim == 2:
        target = target[None]
        recon = recon.reshape(1, *recon.shape)
    _, masked = _plan_indices(plans, recon.shape[1])
    if masked.shape[1] == 0:
        raise UsageError("reconstruction loss needs at least one masked patch")
    if norm_pix:
        target = _normalise_targets(target)
    diff = recon - Tensor(target.astype(recon.dtype, copy=False))
    per_patch = ag.square(ag.take_tokens(diff, masked)).sum(axis=-1)
    return per_patch.mean()


def pooled_features(enc_out: Tensor) -> Tensor:
    """Mean over patch tokens (class token excluded): ``[B, enc_dim]``."""
    if enc_out.ndim == 2:
        enc_out = enc_out.reshape(1, *enc_out.shape)
    return enc_out[:, 1:].mean(axis=1)


def mae_forward(model: MAEModel, images, plans: Sequence[MaskPlan]) -> tuple[Tensor, Tensor]:
    """Masked forward pass: returns (reconstruction loss, encoder output)."""
    x, _ = _as_batch(images)
    enc = encode(model, x, plans)
    recon = decode_and_reconstruct(model, enc, plans)
    patches = patchify(x.astype(model.config.np_dtype, copy=False), model.config.patch_size)
    return recon_loss(patches, recon, plans, norm_pix=model.config.norm_pix_loss), enc
