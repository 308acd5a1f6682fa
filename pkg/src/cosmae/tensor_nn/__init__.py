"""Minimal numpy tensor library: autograd, ViT blocks, AdamW and lr schedule."""

from .autograd import Tensor
from .layers import sincos_pos_embed, transformer_block_forward
from .optim import OptimizerState, ScheduleConfig, adamw_step, lr_at
from .params import ParamSet

__all__ = [
    "OptimizerState",
    "ParamSet",
    "ScheduleConfig",
    "Tensor",
    "adamw_step",
    "lr_at",
    "sincos_pos_embed",
    "transformer_block_forward",
]
