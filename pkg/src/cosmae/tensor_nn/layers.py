"""Functional transformer building blocks over :class:`ParamSet` slices.

Parameters live in a flat ParamSet under dotted names; each forward function
takes the set plus the prefix of the block it should read.
"""

from __future__ import annotations

import math

import numpy as np

from ..errors import ConfigError
from . import autograd as ag
from .autograd import Tensor
from .params import ParamSet

MLP_RATIO = 4
LN_EPS = 1e-6


def init_linear(ps: ParamSet, prefix: str, fan_in: int, fan_out: int, rng, dtype=np.float32, sep: str = ".") -> None:
    """Xavier-uniform weight ``[fan_in, fan_out]`` and zero bias."""
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    w = rng.uniform(-limit, limit, size=(fan_in, fan_out)).astype(dtype)
    ps.add(f"{prefix}{sep}weight", Tensor(w, requires_grad=True))
    ps.add(f"{prefix}{sep}bias", Tensor(np.zeros(fan_out, dtype=dtype), requires_grad=True))


def init_layer_norm(ps: ParamSet, prefix: str, dim: int, dtype=np.float32) -> None:
    ps.add(f"{prefix}.weight", Tensor(np.ones(dim, dtype=dtype), requires_grad=True))
    ps.add(f"{prefix}.bias", Tensor(np.zeros(dim, dtype=dtype), requires_grad=True))


def init_transformer_block(ps: ParamSet, prefix: str, dim: int, rng, dtype=np.float32) -> None:
    init_layer_norm(ps, f"{prefix}.norm1", dim, dtype)
    for name in ("q", "k", "v", "out"):
        init_linear(ps, f"{prefix}.attn.{name}", dim, dim, rng, dtype, sep="_")
    init_layer_norm(ps, f"{prefix}.norm2", dim, dtype)
    init_linear(ps, f"{prefix}.mlp.fc1", dim, MLP_RATIO * dim, rng, dtype)
    init_linear(ps, f"{prefix}.mlp.fc2", MLP_RATIO * dim, dim, rng, dtype)


def linear(x: Tensor, ps, prefix: str) -> Tensor:
    return ag.matmul(x, ps[f"{prefix}.weight"]) + ps[f"{prefix}.bias"]


def layer_norm(x: Tensor, ps, prefix: str) -> Tensor:
    return ag.layer_norm(x, ps[f"{prefix}.weight"], ps[f"{prefix}.bias"], LN_EPS)


def multi_head_attention(x: Tensor, ps, prefix: str, n_heads: int) -> Tensor:
    b, t, d = x.shape
    if d % n_heads:
        raise ConfigError(f"width {d} not divisible by {n_heads} heads")
    dh = d // n_heads

    def heads(name):
        h = ag.matmul(x, ps[f"{prefix}.{name}_weight"]) + ps[f"{prefix}.{name}_bias"]
        return h.reshape(b, t, n_heads, dh).transpose(0, 2, 1, 3)

    q, k, v = heads("q"), heads("k"), heads("v")
    scores = ag.matmul(q, k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(dh))
    attn = ag.softmax(scores)
    ctx = ag.matmul(attn, v).transpose(0, 2, 1, 3).reshape(b, t, d)
    return ag.matmul(ctx, ps[f"{prefix}.out_weight"]) + ps[f"{prefix}.out_bias"]


def transformer_block_forward(x: Tensor, ps, prefix: str, n_heads: int) -> Tensor:
    """Pre-norm ViT block: x + MHA(LN(x)), then + MLP(LN(.)) with GELU.

    Accepts ``[tokens, dim]`` or ``[batch, tokens, dim]`` and returns the
    same shape.
    """
    squeeze = x.ndim == 2
    if squeeze:
        x = x.reshape(1, *x.shape)
    if x.ndim != 3:
        raise ConfigError(f"transformer block expects 2-D or 3-D input, got shape {x.shape}")
    if x.shape[-1] != ps[f"{prefix}.norm1.weight"].shape[0]:
        raise ConfigError(f"block {prefix} has width {ps[f'{prefix}.norm1.weight'].shape[0]}, input {x.shape[-1]}")
    x = x + multi_head_attention(layer_norm(x, ps, f"{prefix}.norm1"), ps, f"{prefix}.attn", n_heads)
    h = ag.gelu(linear(layer_norm(x, ps, f"{prefix}.norm2"), ps, f"{prefix}.mlp.fc1"))
    x = x + linear(h, ps, f"{prefix}.mlp.fc2")
    if squeeze:
        x = x.reshape(x.shape[1:])
    return x


def sincos_pos_embed(n_positions: int, dim: int, grid: int | None = None) -> np.ndarray:
    """Fixed 2-D sine/cosine positional table for a square patch grid.

    Half the channels encode the row, half the column. Returned as float64
    ``[n_positions, dim]``; ``dim`` must be divisible by 4.
    """
    if dim % 4:
        raise ConfigError(f"sin-cos positional embedding needs dim divisible by 4, got {dim}")
    grid = grid or int(round(math.sqrt(n_positions)))
    if grid * grid != n_positions:
        raise ConfigError(f"{n_positions} positions do not form a square grid")
    rows, cols = np.meshgrid(np.arange(grid), np.arange(grid), indexing="ij")

    def encode(pos, d):
        omega = 1.0 / 10000 ** (np.arange(d // 2, dtype=np.float64) / (d / 2.0))
        out = np.outer(pos.ravel().astype(np.float64), omega)
        return np.concatenate([np.sin(out), np.cos(out)], axis=1)

    return np.concatenate([encode(rows, dim // 2), encode(cols, dim // 2)], axis=1)
