"""Selective state-space core.

Per channel ``d`` of an input ``x`` (L x D) the layer runs the diagonal
linear recurrence

    h[t, d] = exp(delta_t * A) * h[t-1, d] + (delta_t * B_t) * x[t, d]
    y[t, d] = C_t . h[t, d]

where ``B_t = W_B x_t``, ``C_t = W_C x_t`` and ``delta_t = softplus(W_delta x_t + bias)``
are recomputed from the input at every step. ``A`` is a real negative diagonal.

The recurrence is evaluated three ways: a plain loop (the oracle), a
chunked Blelloch scan over (decay, load) pairs, and a fused numba kernel
used for training.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels
from .numerics import ops
from .numerics.tensor import ContractError, DimensionError, NumericError, Tape, Tensor, emit

DELTA_MIN = 0.001
DELTA_MAX = 0.1
SCAN_METHODS = ("parallel", "sequential", "fused")


def init_s4d_real(n: int) -> np.ndarray:
    """Real diagonal ``A_n = -(n + 1)``."""
    if n < 1:
        raise ContractError(f"state size must be >= 1, got {n}")
    return -np.arange(1, n + 1, dtype=np.float64)


def inverse_softplus(y: np.ndarray | float) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64)
    return y + np.log(-np.expm1(-y))


@dataclass
class SsmParams:
    """Learnable parameters of one selective SSM over ``d`` channels with state size ``n``.

    With ``selective=False`` the input-dependent projections are replaced by
    learned constants (``b_fixed``, ``c_fixed`` and ``delta_bias`` alone), giving
    a time-invariant system used as an ablation.
    """

    a_diag: Tensor
    w_b: Tensor
    w_c: Tensor
    w_delta: Tensor
    delta_bias: Tensor
    selective: bool = True
    b_fixed: Tensor | None = None
    c_fixed: Tensor | None = None

    def __post_init__(self):
        n = self.a_diag.shape[0]
        d = self.w_b.shape[1]
        if self.w_b.shape != (n, d) or self.w_c.shape != (n, d) or self.w_delta.shape != (1, d):
            raise DimensionError(
                f"inconsistent SSM shapes: a_diag {self.a_diag.shape}, w_b {self.w_b.shape}, "
                f"w_c {self.w_c.shape}, w_delta {self.w_delta.shape}"
            )
        if not self.selective and (self.b_fixed is None or self.c_fixed is None):
            raise ContractError("non-selective SSM needs b_fixed and c_fixed")

    @property
    def n_state(self) -> int:
        return self.a_diag.shape[0]

    @property
    def width(self) -> int:
        return self.w_b.shape[1]

    @classmethod
    def init(cls, d: int, n: int, rng: np.random.Generator, selective: bool = True) -> "SsmParams":
        std = d**-0.5
        delta0 = rng.uniform(DELTA_MIN, DELTA_MAX)
        w_b = Tensor(rng.normal(0.0, std, (n, d)), requires_grad=True)
        w_c = Tensor(rng.normal(0.0, std, (n, d)), requires_grad=True)
        w_delta = Tensor(rng.normal(0.0, std, (1, d)), requires_grad=True)
        fixed = {}
        if not selective:
            fixed = {
                "b_fixed": Tensor(rng.normal(0.0, 1.0, n), requires_grad=True),
                "c_fixed": Tensor(rng.normal(0.0, 1.0, n), requires_grad=True),
            }
        return cls(
            a_diag=Tensor(init_s4d_real(n), requires_grad=True),
            w_b=w_b,
            w_c=w_c,
            w_delta=w_delta,
            delta_bias=Tensor(inverse_softplus(delta0), requires_grad=True),
            selective=selective,
            **fixed,
        )

    def named(self) -> dict[str, Tensor]:
        if not self.selective:
            # projections are unused by the time-invariant ablation
            return {
                "a_diag": self.a_diag,
                "b_fixed": self.b_fixed,
                "c_fixed": self.c_fixed,
                "delta_bias": self.delta_bias,
            }
        return {
            "a_diag": self.a_diag,
            "w_b": self.w_b,
            "w_c": self.w_c,
            "w_delta": self.w_delta,
            "delta_bias": self.delta_bias,
        }


def select(x: Tensor, p: SsmParams) -> tuple[Tensor, Tensor, Tensor]:
    """Input-dependent ``(B_t, C_t, delta_t)`` for every row of ``x`` (..., D).

    Returns tensors of shape (..., N), (..., N) and (...,).
    """
    if x.shape[-1] != p.width:
        raise DimensionError(f"select: input width {x.shape[-1]} != SSM width {p.width}")
    if p.selective:
        b = ops.linear(x, p.w_b)
        c = ops.linear(x, p.w_c)
        raw = ops.add(ops.linear(x, p.w_delta), p.delta_bias)
    else:
        lead = x.shape[:-1]
        zero = Tensor(np.zeros(lead + (1,)))
        b = ops.add(zero, p.b_fixed)
        c = ops.add(zero, p.c_fixed)
        raw = ops.add(zero, p.delta_bias)
    delta = ops.reshape(ops.softplus(raw), x.shape[:-1])
    return b, c, delta


def discretize(a_diag: Tensor, b: Tensor, delta: Tensor) -> tuple[Tensor, Tensor]:
    """``abar = exp(delta * A)`` and the first-order ``bbar = delta * B``."""
    if np.any(delta.data <= 0):
        raise ContractError("discretize: delta must be strictly positive")
    d = ops.reshape(delta, delta.shape + (1,))
    abar = ops.exp(ops.mul(d, a_diag))
    bbar = ops.mul(d, b)
    return abar, bbar


@dataclass(frozen=True)
class ScanElement:
    """Affine map ``h -> decay * h + load`` for one step (or a run of steps)."""

    decay: np.ndarray
    load: np.ndarray

    @classmethod
    def identity(cls, n: int) -> "ScanElement":
        return cls(np.ones(n), np.zeros(n))


def scan_combine(e1: ScanElement, e2: ScanElement) -> ScanElement:
    """Compose ``e1`` (earlier) then ``e2`` (later)."""
    if e1.decay.shape != e2.decay.shape:
        raise DimensionError(f"scan_combine: {e1.decay.shape} vs {e2.decay.shape}")
    return ScanElement(e1.decay * e2.decay, e2.decay * e1.load + e2.load)


def recurrence_sequential(abar: np.ndarray, bbar_x: np.ndarray) -> np.ndarray:
    """``h_t = abar_t * h_{t-1} + bbar_x_t`` from ``h_0 = 0``, time on axis 0."""
    bbar_x = np.asarray(bbar_x, dtype=np.float64)
    abar = np.broadcast_to(np.asarray(abar, dtype=np.float64), bbar_x.shape)
    h = np.empty_like(bbar_x)
    state = np.zeros(bbar_x.shape[1:])
    for t in range(bbar_x.shape[0]):
        state = abar[t] * state + bbar_x[t]
        h[t] = state
    return h


def _blelloch_inclusive(decay: np.ndarray, load: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Inclusive scan along axis 1 (length a power of two) via up-sweep/down-sweep."""
    n = decay.shape[1]
    a = decay.copy()
    b = load.copy()
    step = 1
    while step < n:
        left = slice(step - 1, n, 2 * step)
        right = slice(2 * step - 1, n, 2 * step)
        b[:, right] = a[:, right] * b[:, left] + b[:, right]
        a[:, right] = a[:, left] * a[:, right]
        step *= 2
    a[:, n - 1] = 1.0
    b[:, n - 1] = 0.0
    step = n // 2
    while step >= 1:
        left = slice(step - 1, n, 2 * step)
        right = slice(2 * step - 1, n, 2 * step)
        ta = a[:, left].copy()
        tb = b[:, left].copy()
        a[:, left] = a[:, right]
        b[:, left] = b[:, right]
        # right child prefix = parent prefix, then the left subtree
        b[:, right] = ta * b[:, right] + tb
        a[:, right] = a[:, right] * ta
        step //= 2
    # exclusive prefix followed by the element itself
    return a * decay, decay * b + load


def recurrence_parallel(abar: np.ndarray, bbar_x: np.ndarray, chunk: int = 64) -> np.ndarray:
    """Same result as :func:`recurrence_sequential`, computed as an associative scan.

    Time (axis 0) is cut into chunks of ``chunk`` steps. All chunks are
    scanned at once with a Blelloch scan (each padded with identity elements
    to a power of two); a sequential pass over chunk totals then carries the
    state across chunk boundaries.
    """
    if chunk < 1:
        raise ContractError(f"chunk must be >= 1, got {chunk}")
    bbar_x = np.asarray(bbar_x, dtype=np.float64)
    abar = np.broadcast_to(np.asarray(abar, dtype=np.float64), bbar_x.shape)
    L = bbar_x.shape[0]
    if L == 0:
        return bbar_x.copy()
    rest = bbar_x.shape[1:]
    chunk = min(chunk, L)
    n_chunks = -(-L // chunk)
    width = 1 << (chunk - 1).bit_length()
    pad = n_chunks * chunk - L
    dec = np.ones((n_chunks, width) + rest)
    load = np.zeros((n_chunks, width) + rest)
    dec[:, :chunk] = np.concatenate([abar, np.ones((pad,) + rest)]).reshape((n_chunks, chunk) + rest)
    load[:, :chunk] = np.concatenate([bbar_x, np.zeros((pad,) + rest)]).reshape((n_chunks, chunk) + rest)
    inc_a, inc_b = _blelloch_inclusive(dec, load)
    inc_a = inc_a[:, :chunk]
    inc_b = inc_b[:, :chunk]
    carry = np.zeros((n_chunks,) + rest)
    state = np.zeros(rest)
    for k in range(n_chunks):
        carry[k] = state
        state = inc_a[k, chunk - 1] * state + inc_b[k, chunk - 1]
    h = inc_b + inc_a * carry[:, None]
    return h.reshape((n_chunks * chunk,) + rest)[:L]


def _recurrence(method: str, abar, bbar_x, chunk: int) -> np.ndarray:
    if method == "parallel":
        return recurrence_parallel(abar, bbar_x, chunk)
    if method == "sequential":
        return recurrence_sequential(abar, bbar_x)
    raise ContractError(f"unknown scan method {method!r}")


def _as_batched(arr: np.ndarray, lead: int) -> np.ndarray:
    # collapse leading batch axes (possibly none) into one
    return arr.reshape((-1,) + arr.shape[lead:]) if lead else arr[None]


def selective_scan(
    x: Tensor, abar: Tensor, bbar: Tensor, c: Tensor, method: str = "parallel", chunk: int = 64
) -> Tensor:
    """Run the recurrence and readout for inputs ``x`` (..., L, D).

    ``abar``, ``bbar`` and ``c`` are (..., L, N) and shared over channels.
    The backward rule is a reverse-time scan of the adjoint state
    ``g_{t-1} = abar_t * g_t + C_{t-1} dy_{t-1}``.
    """
    if method not in SCAN_METHODS:
        raise ContractError(f"unknown scan method {method!r}; expected one of {SCAN_METHODS}")
    if x.ndim < 2 or abar.shape != x.shape[:-1] + (abar.shape[-1],) or bbar.shape != abar.shape or c.shape != abar.shape:
        raise DimensionError(
            f"selective_scan: x {x.shape}, abar {abar.shape}, bbar {bbar.shape}, c {c.shape}"
        )
    lead = x.ndim - 2
    xs = _as_batched(x.data, lead)
    As = _as_batched(abar.data, lead)
    Bs = _as_batched(bbar.data, lead)
    Cs = _as_batched(c.data, lead)

    if method == "fused":
        y = _kernels.scan_forward(xs, As, Bs, Cs)
        states = None
    else:
        # (L, batch, D, N) with time leading
        load = np.einsum("bln,bld->lbdn", Bs, xs)
        decay = np.broadcast_to(np.transpose(As, (1, 0, 2))[:, :, None, :], load.shape)
        states = _recurrence(method, decay, load, chunk)
        y = np.einsum("lbdn,bln->bld", states, Cs)

    def vjp(g):
        gy = _as_batched(np.ascontiguousarray(g), lead)
        if method == "fused":
            gx, ga, gb, gc = _kernels.scan_backward(xs, As, Bs, Cs, gy)
        else:
            gx, ga, gb, gc = _scan_backward_numpy(method, chunk, xs, As, Bs, Cs, gy, states)
        return gx.reshape(x.shape), ga.reshape(abar.shape), gb.reshape(bbar.shape), gc.reshape(c.shape)

    return emit("ssm.scan", y.reshape(x.shape), (x, abar, bbar, c), vjp)


def _scan_backward_numpy(method, chunk, xs, As, Bs, Cs, gy, states):
    # adjoint recurrence, run forward in reversed time:
    #   g_t = abar_{t+1} * g_{t+1} + C_t dy_t
    load = np.einsum("bln,bld->lbdn", Cs, gy)[::-1]
    a_t = np.transpose(As, (1, 0, 2))
    shifted = np.concatenate([np.ones_like(a_t[:1]), a_t[::-1][:-1]])
    decay = np.broadcast_to(shifted[:, :, None, :], load.shape)
    adj = _recurrence(method, decay, load, chunk)[::-1]
    prev = np.concatenate([np.zeros_like(states[:1]), states[:-1]])
    gx = np.einsum("lbdn,bln->bld", adj, Bs)
    gb = np.einsum("lbdn,bld->bln", adj, xs)
    ga = np.einsum("lbdn,lbdn->bln", adj, prev)
    gc = np.einsum("bld,lbdn->bln", gy, states)
    return gx, ga, gb, gc


def ssm_forward(x: Tensor, p: SsmParams, method: str = "parallel", chunk: int = 64) -> Tensor:
    """Selective SSM over ``x`` (..., L, D) -> (..., L, D). Causal in time."""
    if not np.isfinite(x.data).all():
        raise NumericError("ssm.input")
    b, c, delta = select(x, p)
    abar, bbar = discretize(p.a_diag, b, delta)
    return selective_scan(x, abar, bbar, c, method=method, chunk=chunk)


@dataclass
class SsmContext:
    """Saved forward pass, required by :func:`ssm_backward`."""

    tape: Tape
    x: Tensor
    y: Tensor
    params: SsmParams


def ssm_forward_traced(x, p: SsmParams, method: str = "parallel", chunk: int = 64) -> tuple[Tensor, SsmContext]:
    x = x if isinstance(x, Tensor) and x.requires_grad else Tensor(np.asarray(getattr(x, "data", x)), requires_grad=True)
    with Tape() as tape:
        y = ssm_forward(x, p, method=method, chunk=chunk)
    return y, SsmContext(tape, x, y, p)


def ssm_backward(upstream: np.ndarray, ctx: SsmContext | None) -> dict[str, np.ndarray]:
    """Gradients of ``sum(upstream * y)`` w.r.t. the input and every SSM parameter."""
    if ctx is None:
        raise ContractError("ssm_backward needs the saved forward context")
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape != ctx.y.shape:
        raise DimensionError(f"upstream {upstream.shape} does not match output {ctx.y.shape}")
    with ctx.tape:
        loss = ops.sum(ops.mul(ctx.y, Tensor(upstream)))
    grads = ctx.tape.backward(loss)
    out = {"x": grads[ctx.x]}
    for name, t in ctx.params.named().items():
        out[name] = grads[t]
    return out
