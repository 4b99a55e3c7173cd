"""AdamW with decoupled weight decay, plus the learning-rate schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ..numerics.tensor import ContractError, DimensionError, NumericError, Tensor


@dataclass
class OptimConfig:
    lr: float = 2.0e-3
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    warmup_steps: int = 1000
    grad_clip: float = 1.0


@dataclass
class OptimizerState:
    lr: float
    weight_decay: float = 0.01
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    step: int = 0
    m: dict[int, np.ndarray] = field(default_factory=dict)
    v: dict[int, np.ndarray] = field(default_factory=dict)

    @classmethod
    def from_config(cls, cfg: OptimConfig) -> "OptimizerState":
        return cls(lr=cfg.lr, weight_decay=cfg.weight_decay, betas=(cfg.beta1, cfg.beta2), eps=cfg.eps)


def decays(p: Tensor) -> bool:
    """Weight decay applies to matrices only; gains, biases and the SSM diagonal are exempt."""
    return p.ndim >= 2


def adamw_step(params: list[Tensor], grads: list[np.ndarray], st: OptimizerState, lr: float | None = None) -> None:
    """One AdamW update, in place on ``params``.

    The decay ``p <- p * (1 - lr * wd)`` is applied to the parameter itself and
    never enters the moment estimates.
    """
    if len(params) != len(grads):
        raise ContractError("params and grads differ in length")
    for p, g in zip(params, grads):
        if g.shape != p.shape:
            raise DimensionError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        if not np.isfinite(g).all():
            raise NumericError("adamw_step", f"non-finite gradient for parameter {p.name or p.shape}")
    lr = st.lr if lr is None else lr
    b1, b2 = st.betas
    st.step += 1
    c1 = 1.0 - b1**st.step
    c2 = 1.0 - b2**st.step
    for p, g in zip(params, grads):
        key = id(p)
        m = st.m.get(key)
        if m is None:
            m = st.m[key] = np.zeros(p.shape)
            st.v[key] = np.zeros(p.shape)
        v = st.v[key]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        new = p.data.copy()
        if st.weight_decay and decays(p):
            new *= 1.0 - lr * st.weight_decay
        new -= lr * (m / c1) / (np.sqrt(v / c2) + st.eps)
        new.flags.writeable = False
        p.data = new


def clip_global_norm(grads: list[np.ndarray], max_norm: float) -> tuple[list[np.ndarray], float]:
    """Rescale ``grads`` so their joint L2 norm is at most ``max_norm``.

    Returns the (possibly new) gradient list and the pre-clip norm.
    """
    norm = math.sqrt(sum(float((g * g).sum()) for g in grads))
    if max_norm > 0 and norm > max_norm:
        s = max_norm / norm
        grads = [g * s for g in grads]
    return grads, norm


def lr_at(step: int, base: float, warmup: int, total: int) -> float:
    """Linear warmup then cosine decay to zero at ``total``."""
    if warmup > 0 and step < warmup:
        return base * (step + 1) / warmup
    if total <= warmup:
        return base
    frac = min(1.0, (step - warmup) / (total - warmup))
    return base * 0.5 * (1.0 + math.cos(math.pi * frac))
