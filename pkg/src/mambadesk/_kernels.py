"""Fused selective-scan kernels (numba).

Shapes: x (B, L, D); decay, load_coef, readout (B, L, N). The decay and
input coefficient are shared by all D channels of a sequence, so the
state update for lane (b, d) is

    h[t, n] = decay[t, n] * h[t-1, n] + load_coef[t, n] * x[t, d]
    y[t, d] = sum_n readout[t, n] * h[t, n]

Sequences in the batch are independent and are spread over worker threads;
channels within one sequence run in a fixed order, so results do not depend
on the thread count.
The backward kernel recomputes the forward states per lane instead of
storing the (B, L, D, N) state tensor.
"""

from __future__ import annotations

import numba as nb
import numpy as np

# the bundled TBB is too old for numba; skip the probe and its warning
if nb.config.THREADING_LAYER == "default":
    nb.config.THREADING_LAYER = "omp"


@nb.njit(parallel=True, cache=True)
def scan_forward(x, decay, load_coef, readout):
    B, L, D = x.shape
    N = decay.shape[2]
    y = np.zeros((B, L, D))
    for b in nb.prange(B):
        h = np.zeros((D, N))
        for t in range(L):
            for d in range(D):
                xv = x[b, t, d]
                acc = 0.0
                for n in range(N):
                    h[d, n] = decay[b, t, n] * h[d, n] + load_coef[b, t, n] * xv
                    acc += readout[b, t, n] * h[d, n]
                y[b, t, d] = acc
    return y


@nb.njit(parallel=True, cache=True)
def scan_backward(x, decay, load_coef, readout, gy):
    """Reverse-time adjoint scan. Returns grads for x, decay, load_coef, readout."""
    B, L, D = x.shape
    N = decay.shape[2]
    gx = np.zeros((B, L, D))
    g_decay = np.zeros((B, L, N))
    g_load = np.zeros((B, L, N))
    g_read = np.zeros((B, L, N))
    for b in nb.prange(B):
        hs = np.zeros((L + 1, N))
        adj = np.zeros(N)
        for d in range(D):
            for t in range(L):
                xv = x[b, t, d]
                for n in range(N):
                    hs[t + 1, n] = decay[b, t, n] * hs[t, n] + load_coef[b, t, n] * xv
            for t in range(L - 1, -1, -1):
                gyv = gy[b, t, d]
                xv = x[b, t, d]
                acc = 0.0
                for n in range(N):
                    g_read[b, t, n] += gyv * hs[t + 1, n]
                    if t + 1 < L:
                        adj[n] = decay[b, t + 1, n] * adj[n] + gyv * readout[b, t, n]
                    else:
                        adj[n] = gyv * readout[b, t, n]
                    acc += adj[n] * load_coef[b, t, n]
                    g_load[b, t, n] += adj[n] * xv
                    g_decay[b, t, n] += adj[n] * hs[t, n]
                gx[b, t, d] = acc
    return gx, g_decay, g_load, g_read
