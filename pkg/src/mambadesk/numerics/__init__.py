from . import checkpoint, ops
from .ops import (
    add,
    cross_entropy,
    dropout,
    embedding,
    exp,
    flip,
    layer_norm,
    linear,
    matmul,
    mean,
    mul,
    reshape,
    scale,
    sigmoid,
    silu,
    softmax,
    softplus,
    split,
    sub,
    take,
    transpose,
)
from .tensor import (
    ContractError,
    DimensionError,
    Gradients,
    NumericError,
    Tape,
    Tensor,
    active_tape,
    as_tensor,
    backward,
    emit,
)

__all__ = [
    "ContractError",
    "DimensionError",
    "Gradients",
    "NumericError",
    "Tape",
    "Tensor",
    "active_tape",
    "add",
    "as_tensor",
    "backward",
    "checkpoint",
    "cross_entropy",
    "dropout",
    "embedding",
    "emit",
    "exp",
    "flip",
    "layer_norm",
    "linear",
    "matmul",
    "mean",
    "mul",
    "ops",
    "reshape",
    "scale",
    "sigmoid",
    "silu",
    "softmax",
    "softplus",
    "split",
    "sub",
    "take",
    "transpose",
]
