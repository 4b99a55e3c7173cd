"""Synthetic token tasks.

Token conventions:

* selective copy -- 0 noise, 1 marker, 2.. content. Content tokens sit at
  sorted random positions in the first ``seq_len - n_memorize`` slots; the
  last ``n_memorize`` slots hold markers, where the model must emit the
  content in order of appearance.
* induction heads -- 1 is the trigger, 2.. filler/payload. The trigger
  occurs once mid-sequence, followed by the payload, and again at the end;
  the answer is the payload.
* seq reverse / seq identity -- 0 is the decoder start token, 1.. content.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..numerics.tensor import ContractError

KINDS = ("selective_copy", "induction_heads", "seq_reverse", "seq_identity")

NOISE, MARKER = 0, 1
TRIGGER = 1
START = 0


@dataclass
class TaskSpec:
    kind: str = "selective_copy"
    seq_len: int = 64
    vocab_size: int = 16
    n_memorize: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ContractError(f"task kind must be one of {KINDS}, got {self.kind!r}")
        if self.vocab_size < 4:
            raise ContractError("vocab_size must be >= 4 (content, noise and marker tokens)")
        if self.kind == "selective_copy" and not 0 <= self.n_memorize < self.seq_len:
            raise ContractError(f"need 0 <= n_memorize < seq_len, got {self.n_memorize}, {self.seq_len}")
        if self.kind == "induction_heads" and self.seq_len < 4:
            raise ContractError("induction heads needs seq_len >= 4")
        if self.seq_len < 1:
            raise ContractError("seq_len must be positive")


@dataclass
class Batch:
    inputs: np.ndarray
    targets: np.ndarray
    dec_inputs: np.ndarray | None = None

    @property
    def readout(self) -> int:
        """Number of trailing positions scored (all decoder positions for seq2seq)."""
        return self.targets.shape[1]


def _rng(spec: TaskSpec, rng):
    return np.random.default_rng(spec.seed) if rng is None else rng


def gen_selective_copy(spec: TaskSpec, rng: np.random.Generator | None = None) -> tuple[np.ndarray, np.ndarray]:
    rng = _rng(spec, rng)
    L, k = spec.seq_len, spec.n_memorize
    inputs = np.full(L, NOISE, dtype=np.int64)
    pos = np.sort(rng.choice(L - k, size=k, replace=False))
    content = rng.integers(2, spec.vocab_size, size=k)
    inputs[pos] = content
    inputs[L - k :] = MARKER
    return inputs, content.astype(np.int64)


def gen_induction_heads(spec: TaskSpec, rng: np.random.Generator | None = None) -> tuple[np.ndarray, np.int64]:
    rng = _rng(spec, rng)
    L = spec.seq_len
    inputs = rng.integers(2, spec.vocab_size, size=L)
    p = rng.integers(0, L - 2)
    inputs[p] = TRIGGER
    inputs[L - 1] = TRIGGER
    return inputs.astype(np.int64), np.int64(inputs[p + 1])


def gen_seq_reverse(spec: TaskSpec, rng: np.random.Generator | None = None, reverse: bool = True):
    """Return ``(source, target, decoder_inputs)``; decoder inputs are the
    target shifted right behind the start token."""
    rng = _rng(spec, rng)
    src = rng.integers(1, spec.vocab_size, size=spec.seq_len).astype(np.int64)
    tgt = src[::-1].copy() if reverse else src.copy()
    dec = np.concatenate([[START], tgt[:-1]]).astype(np.int64)
    return src, tgt, dec


def make_batch(spec: TaskSpec, rng: np.random.Generator, size: int) -> Batch:
    if spec.kind == "selective_copy":
        pairs = [gen_selective_copy(spec, rng) for _ in range(size)]
        return Batch(np.stack([p[0] for p in pairs]), np.stack([p[1] for p in pairs]).reshape(size, -1))
    if spec.kind == "induction_heads":
        pairs = [gen_induction_heads(spec, rng) for _ in range(size)]
        return Batch(np.stack([p[0] for p in pairs]), np.array([[p[1]] for p in pairs], dtype=np.int64))
    triples = [gen_seq_reverse(spec, rng, reverse=spec.kind == "seq_reverse") for _ in range(size)]
    return Batch(
        np.stack([t[0] for t in triples]),
        np.stack([t[1] for t in triples]),
        np.stack([t[2] for t in triples]),
    )
