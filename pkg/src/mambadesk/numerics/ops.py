"""Differentiable primitives. Each op computes its value with numpy and
registers a hand-written vector-Jacobian product on the active tape."""

from __future__ import annotations

import numpy as np
from scipy.special import expit

from .tensor import ContractError, DimensionError, Tensor, as_tensor, emit


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data + b.data
    except ValueError:
        raise DimensionError(f"add: cannot combine shapes {a.shape} and {b.shape}") from None
    return emit("add", out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data - b.data
    except ValueError:
        raise DimensionError(f"sub: cannot combine shapes {a.shape} and {b.shape}") from None
    return emit("sub", out, (a, b), lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data * b.data
    except ValueError:
        raise DimensionError(f"mul: cannot combine shapes {a.shape} and {b.shape}") from None
    return emit(
        "mul",
        out,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def scale(a: Tensor, c: float) -> Tensor:
    return emit("scale", a.data * c, (a,), lambda g: (g * c,))


def matmul(a, b) -> Tensor:
    """Matrix product. ``a`` may carry leading batch axes; ``b`` is either a
    plain ``k x n`` matrix or batched with the same leading axes as ``a``."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: inner extents differ for shapes {a.shape} and {b.shape}")
    if b.ndim > 2 and b.shape[:-2] != a.shape[:-2]:
        raise DimensionError(f"matmul: batch extents differ for shapes {a.shape} and {b.shape}")
    out = np.matmul(a.data, b.data)

    def vjp(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        if b.ndim == 2:
            gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return ga, gb

    return emit("matmul", out, (a, b), vjp)


def linear(x: Tensor, w: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ w.T + bias`` with ``w`` stored as (out_features, in_features)."""
    if x.shape[-1] != w.shape[-1]:
        raise DimensionError(f"linear: input width {x.shape} does not match weight {w.shape}")
    out = x.data @ w.data.T
    if bias is not None:
        out = out + bias.data

    def vjp(g):
        gx = g @ w.data
        gw = g.reshape(-1, g.shape[-1]).T @ x.data.reshape(-1, x.shape[-1])
        if bias is None:
            return gx, gw
        return gx, gw, g.reshape(-1, g.shape[-1]).sum(axis=0)

    inputs = (x, w) if bias is None else (x, w, bias)
    return emit("linear", out, inputs, vjp)


def softplus_value(x: np.ndarray) -> np.ndarray:
    """Overflow-safe log(1 + exp(x)) = max(x, 0) + log1p(exp(-|x|))."""
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def sigmoid_value(x: np.ndarray) -> np.ndarray:
    return expit(x)


def softplus(x) -> Tensor:
    x = as_tensor(x)
    return emit("softplus", softplus_value(x.data), (x,), lambda g: (g * sigmoid_value(x.data),))


def sigmoid(x: Tensor) -> Tensor:
    s = sigmoid_value(x.data)
    return emit("sigmoid", s, (x,), lambda g: (g * s * (1.0 - s),))


def silu(x: Tensor) -> Tensor:
    s = sigmoid_value(x.data)
    return emit("silu", x.data * s, (x,), lambda g: (g * s * (1.0 + x.data * (1.0 - s)),))


def exp(x: Tensor) -> Tensor:
    e = np.exp(x.data)
    return emit("exp", e, (x,), lambda g: (g * e,))


def sum(x: Tensor) -> Tensor:  # noqa: A001
    return emit("sum", np.asarray(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, x.shape),))


def mean(x: Tensor) -> Tensor:
    n = x.size
    return emit("mean", np.asarray(x.data.mean()), (x,), lambda g: (np.broadcast_to(g / n, x.shape),))


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    return emit("reshape", x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes: tuple[int, ...]) -> Tensor:
    inv = np.argsort(axes)
    return emit("transpose", np.transpose(x.data, axes).copy(), (x,), lambda g: (np.transpose(g, inv),))


def flip(x: Tensor, axis: int) -> Tensor:
    return emit("flip", np.flip(x.data, axis=axis).copy(), (x,), lambda g: (np.flip(g, axis=axis),))


def take(x: Tensor, start: int, stop: int, axis: int) -> Tensor:
    """Contiguous slice ``[start:stop]`` along ``axis``."""
    idx = [slice(None)] * x.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)

    def vjp(g):
        full = np.zeros(x.shape)
        full[idx] = g
        return (full,)

    return emit("take", x.data[idx].copy(), (x,), vjp)


def split(x: Tensor, sizes: list[int], axis: int = -1) -> list[Tensor]:
    if np.sum(sizes) != x.shape[axis]:
        raise DimensionError(f"split: sizes {sizes} do not cover axis of shape {x.shape}")
    axis = axis % x.ndim
    out, start = [], 0
    for n in sizes:
        out.append(take(x, start, start + n, axis))
        start += n
    return out


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (p * (g - (g * p).sum(axis=axis, keepdims=True)),)

    return emit("softmax", p, (x,), vjp)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    out = xhat * gain.data + bias.data

    def vjp(g):
        gh = g * gain.data
        gx = rstd * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        flat = g.reshape(-1, g.shape[-1])
        return gx, (flat * xhat.reshape(flat.shape)).sum(axis=0), flat.sum(axis=0)

    return emit("layer_norm", out, (x, gain, bias), vjp)


def dropout(x: Tensor, p: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    """Inverted dropout; identity outside training or when ``p == 0``."""
    if not 0.0 <= p < 1.0:
        raise ContractError(f"dropout probability must lie in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    if rng is None:
        raise ContractError("dropout in training mode needs a random generator")
    mask = (rng.random(x.shape) >= p) / (1.0 - p)
    return emit("dropout", x.data * mask, (x,), lambda g: (g * mask,))


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ContractError(f"embedding: token id out of range for table of {table.shape[0]} rows")

    def vjp(g):
        gt = np.zeros(table.shape)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (gt,)

    return emit("embedding", table.data[ids], (table,), vjp)


def cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean token cross-entropy; ``targets`` holds class ids for logits[..., :]."""
    targets = np.asarray(targets, dtype=np.int64)
    if logits.shape[:-1] != targets.shape:
        raise DimensionError(f"cross_entropy: logits {logits.shape} vs targets {targets.shape}")
    flat = logits.data.reshape(-1, logits.shape[-1])
    t = targets.reshape(-1)
    z = flat - flat.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = t.size
    loss = -logp[np.arange(n), t].mean()

    def vjp(g):
        p = np.exp(logp)
        p[np.arange(n), t] -= 1.0
        return ((g / n) * p.reshape(logits.shape),)

    return emit("cross_entropy", np.asarray(loss), (logits,), vjp)
