"""Runtime and memory scaling of the SSM scan against quadratic attention.

Peak memory is the tracemalloc high-water mark over one kernel call;
numpy reports its buffers to tracemalloc, so this counts live array bytes
without OS-level RSS noise.
"""

from __future__ import annotations

import csv
import logging
import math
import statistics
import time
import tracemalloc
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .numerics.tensor import ContractError
from .ssm import init_s4d_real, recurrence_parallel, recurrence_sequential

log = logging.getLogger(__name__)

KERNELS = ("attention_reference", "ssm_scan_parallel", "ssm_scan_sequential")
CSV_HEADER = ("kernel", "seq_len", "wall_time_ns", "peak_bytes", "trials")


@dataclass
class BenchRow:
    kernel: str
    seq_len: int
    wall_time_ns: int
    peak_bytes: int
    trials: int
    status: str = "ok"  # "ok", "failed" (out of memory), "capped" (skipped above the memory cap), "flaky"

    @property
    def measured(self) -> bool:
        return self.status in ("ok", "flaky")


def attention_reference(q: np.ndarray, k: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Single-head softmax(q k^T / sqrt(d)) v with the full L x L score matrix."""
    scores = q @ k.T
    scores *= 1.0 / math.sqrt(q.shape[1])
    scores -= scores.max(axis=1, keepdims=True)
    np.exp(scores, out=scores)
    scores /= scores.sum(axis=1, keepdims=True)
    return scores @ v


@dataclass
class ScanInstance:
    decay: np.ndarray  # (L, 1, N), shared across channels
    load: np.ndarray  # (L, D, N)


def make_scan_instance(L: int, d_model: int, n_state: int, rng: np.random.Generator) -> ScanInstance:
    delta = rng.uniform(0.001, 0.1, size=(L, 1, 1))
    decay = np.exp(delta * init_s4d_real(n_state))
    load = rng.normal(size=(L, d_model, n_state)) * delta
    return ScanInstance(decay, load)


def _time_call(fn: Callable[[], object], trials: int, warmup: int) -> int:
    for _ in range(warmup):
        fn()
    samples = []
    for _ in range(trials):
        t0 = time.perf_counter_ns()
        fn()
        samples.append(time.perf_counter_ns() - t0)
    return max(1, int(statistics.median(samples)))


def _peak_bytes(fn: Callable[[], object]) -> int:
    tracemalloc.start()
    try:
        tracemalloc.reset_peak()
        base, _ = tracemalloc.get_traced_memory()
        fn()
        _, peak = tracemalloc.get_traced_memory()
    finally:
        tracemalloc.stop()
    return max(0, peak - base)


def bench_scaling(
    lengths: list[int],
    d_model: int = 64,
    trials: int = 5,
    n_state: int = 16,
    chunk: int = 64,
    warmup: int = 1,
    kernels: tuple[str, ...] = KERNELS,
    attention_cap_bytes: float = 3.0e9,
    seed: int = 0,
    check_tol: float = 1e-10,
) -> list[BenchRow]:
    """Median wall time and peak allocation per kernel and length.

    Attention lengths whose score matrix would exceed ``attention_cap_bytes``
    are recorded as ``capped``; a ``MemoryError`` is recorded as ``failed``.
    Medians that drop as L grows are re-measured up to three times and
    flagged ``flaky`` if the drop persists. The parallel scan output is
    checked against the sequential scan on every benchmarked instance.
    """
    if list(lengths) != sorted(lengths):
        raise ContractError("lengths must be sorted ascending")
    if trials < 5:
        raise ContractError(f"need at least 5 trials, got {trials}")
    unknown = set(kernels) - set(KERNELS)
    if unknown:
        raise ContractError(f"unknown kernels {sorted(unknown)}")
    rng = np.random.default_rng(seed)
    rows: list[BenchRow] = []
    for L in lengths:
        inst = make_scan_instance(L, d_model, n_state, rng)
        if "ssm_scan_parallel" in kernels or "ssm_scan_sequential" in kernels:
            diff = np.abs(
                recurrence_parallel(inst.decay, inst.load, chunk) - recurrence_sequential(inst.decay, inst.load)
            ).max()
            if diff >= check_tol:
                raise AssertionError(f"parallel scan disagrees with sequential at L={L}: {diff:.3e}")
        q, k, v = (rng.normal(size=(L, d_model)) for _ in range(3))
        calls = {
            "attention_reference": lambda: attention_reference(q, k, v),
            "ssm_scan_parallel": lambda: recurrence_parallel(inst.decay, inst.load, chunk),
            "ssm_scan_sequential": lambda: recurrence_sequential(inst.decay, inst.load),
        }
        for name in kernels:
            if name == "attention_reference" and 8.0 * L * L > attention_cap_bytes:
                rows.append(BenchRow(name, L, 0, 0, 0, status="capped"))
                continue
            try:
                t = _time_call(calls[name], trials, warmup)
                peak = _peak_bytes(calls[name])
            except MemoryError:
                log.warning("%s ran out of memory at L=%d", name, L)
                rows.append(BenchRow(name, L, 0, 0, 0, status="failed"))
                continue
            rows.append(BenchRow(name, L, t, peak, trials))
        del inst, q, k, v
    _enforce_monotone(rows, lengths, d_model, n_state, chunk, trials, warmup, seed)
    rows.sort(key=lambda r: (r.kernel, r.seq_len))
    return rows


def _enforce_monotone(rows, lengths, d_model, n_state, chunk, trials, warmup, seed) -> None:
    by_kernel: dict[str, list[BenchRow]] = {}
    for r in rows:
        if r.measured:
            by_kernel.setdefault(r.kernel, []).append(r)
    for name, rs in by_kernel.items():
        rs.sort(key=lambda r: r.seq_len)
        for prev, cur in zip(rs, rs[1:]):
            retries = 0
            while cur.wall_time_ns < prev.wall_time_ns and retries < 3:
                retries += 1
                rng = np.random.default_rng(seed + cur.seq_len)
                L = cur.seq_len
                if name == "attention_reference":
                    q, k, v = (rng.normal(size=(L, d_model)) for _ in range(3))
                    fn = lambda: attention_reference(q, k, v)  # noqa: E731
                else:
                    inst = make_scan_instance(L, d_model, n_state, rng)
                    fn = (
                        (lambda: recurrence_parallel(inst.decay, inst.load, chunk))
                        if name == "ssm_scan_parallel"
                        else (lambda: recurrence_sequential(inst.decay, inst.load))
                    )
                cur.wall_time_ns = _time_call(fn, trials, warmup)
            if cur.wall_time_ns < prev.wall_time_ns:
                cur.status = "flaky"
                log.warning("%s: median time dropped from L=%d to L=%d", name, prev.seq_len, cur.seq_len)


def fit_loglog_slope(rows: list[BenchRow], field: str = "wall_time_ns") -> dict[str, float]:
    """Least-squares slope of log(field) against log(seq_len), per kernel."""
    groups: dict[str, list[BenchRow]] = {}
    for r in rows:
        if r.measured:
            groups.setdefault(r.kernel, []).append(r)
    out = {}
    for name, rs in groups.items():
        if len({r.seq_len for r in rs}) < 4:
            raise ContractError(f"{name}: need at least 4 lengths to fit a slope, got {len(rs)}")
        x = np.log([r.seq_len for r in rs])
        y = np.log([float(getattr(r, field)) for r in rs])
        out[name] = float(np.polyfit(x, y, 1)[0])
    return out


def write_csv(path, rows: list[BenchRow]) -> None:
    """Rows that were not measured carry their status in the time and memory columns."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_HEADER)
        for r in rows:
            if r.measured:
                w.writerow([r.kernel, r.seq_len, r.wall_time_ns, r.peak_bytes, r.trials])
            else:
                w.writerow([r.kernel, r.seq_len, r.status, r.status, r.trials])


def read_csv(path) -> list[BenchRow]:
    rows = []
    with open(path, newline="") as fh:
        for rec in csv.DictReader(fh):
            if rec["wall_time_ns"].isdigit():
                rows.append(
                    BenchRow(rec["kernel"], int(rec["seq_len"]), int(rec["wall_time_ns"]), int(rec["peak_bytes"]), int(rec["trials"]))
                )
            else:
                rows.append(BenchRow(rec["kernel"], int(rec["seq_len"]), 0, 0, int(rec["trials"]), status=rec["wall_time_ns"]))
    return rows
