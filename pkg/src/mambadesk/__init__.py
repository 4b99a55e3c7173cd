"""Selective state-space (Mamba) layers, block variants and a desk-scale training/benchmark harness."""

from .blocks import (
    BiMambaBlock,
    BlockConfig,
    CrossAttention,
    DecoderBlock,
    MambaBlock,
    ModelConfig,
    TokenModel,
    load_model,
    save_model,
)
from .ssm import SsmParams, init_s4d_real, recurrence_parallel, recurrence_sequential, ssm_forward

__version__ = "0.1.0"

__all__ = [
    "BiMambaBlock",
    "BlockConfig",
    "CrossAttention",
    "DecoderBlock",
    "MambaBlock",
    "ModelConfig",
    "SsmParams",
    "TokenModel",
    "init_s4d_real",
    "load_model",
    "recurrence_parallel",
    "recurrence_sequential",
    "save_model",
    "ssm_forward",
]
