"""Dense float64 tensors and the reverse-mode tape that records operations on them."""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Sequence

import numpy as np


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class ContractError(ValueError):
    """A precondition of an operation was violated."""


class NumericError(FloatingPointError):
    """A non-finite value appeared in the output of an operation."""

    def __init__(self, stage: str, detail: str = ""):
        self.stage = stage
        msg = f"non-finite value produced by {stage}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class Tensor:
    """Immutable row-major float64 array.

    Parameters are tensors created with ``requires_grad=True``; the tape
    only records operations that (transitively) touch one.
    """

    __slots__ = ("data", "requires_grad", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64, order="C", copy=True)
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        # ownership of arr passes to the tensor; no copy
        t = cls.__new__(cls)
        if not isinstance(arr, np.ndarray):
            arr = np.asarray(arr)
        if arr.dtype != np.float64:
            arr = arr.astype(np.float64)
        if not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        arr.flags.writeable = False
        t.data = arr
        t.requires_grad = False
        t.name = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag})"

    # operator sugar; the implementations live in ops
    def __add__(self, other):
        from . import ops

        return ops.add(self, other)

    def __sub__(self, other):
        from . import ops

        return ops.sub(self, other)

    def __mul__(self, other):
        from . import ops

        return ops.mul(self, other)

    def __matmul__(self, other):
        from . import ops

        return ops.matmul(self, other)

    def __neg__(self):
        from . import ops

        return ops.scale(self, -1.0)


def _not_scalar(t: Tensor) -> float:
    raise ContractError(f"item() needs a single-element tensor, got shape {t.shape}")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class _Record:
    __slots__ = ("name", "out", "inputs", "vjp")

    def __init__(self, name, out, inputs, vjp):
        self.name = name
        self.out = out
        self.inputs = inputs
        self.vjp = vjp


class Gradients:
    """Gradient map keyed by tensor identity. Untouched tensors read as zeros."""

    def __init__(self, grads: dict[int, np.ndarray], owners: dict[int, Tensor]):
        self._grads = grads
        self._owners = owners

    def __getitem__(self, t: Tensor) -> np.ndarray:
        g = self._grads.get(id(t))
        if g is None or self._owners.get(id(t)) is not t:
            return np.zeros(t.shape)
        return g

    def __contains__(self, t: Tensor) -> bool:
        return self._owners.get(id(t)) is t and id(t) in self._grads


_local = threading.local()


def active_tape() -> "Tape | None":
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


class Tape:
    """Ordered record of primitive operations for one forward pass.

    Use as a context manager; operations executed inside the block are
    recorded when any input is a parameter or a recorded output.
    """

    def __init__(self):
        self.records: list[_Record] = []
        self._tracked: dict[int, Tensor] = {}

    def __enter__(self) -> "Tape":
        stack = getattr(_local, "stack", None)
        if stack is None:
            stack = _local.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.stack.pop()

    def is_tracked(self, t: Tensor) -> bool:
        return t.requires_grad or self._tracked.get(id(t)) is t

    def record(self, name: str, out: Tensor, inputs: Sequence[Tensor], vjp: Callable) -> None:
        self.records.append(_Record(name, out, tuple(inputs), vjp))
        self._tracked[id(out)] = out

    def backward(self, loss: Tensor) -> Gradients:
        """Reverse sweep from a scalar ``loss``; every record is visited once."""
        if loss.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        if not self.is_tracked(loss):
            raise ContractError("loss was not produced under this tape")
        grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape)}
        owners: dict[int, Tensor] = {id(loss): loss}
        # arrays returned by a vjp may alias its upstream or each other; they
        # are only mutated after a private copy has been made
        owned: set[int] = set()
        for rec in reversed(self.records):
            g = grads.pop(id(rec.out), None) if not rec.out.requires_grad else grads.get(id(rec.out))
            if g is None:
                continue
            in_grads = rec.vjp(g)
            for inp, ig in zip(rec.inputs, in_grads):
                if ig is None or not self.is_tracked(inp):
                    continue
                key = id(inp)
                prev = grads.get(key)
                if prev is None:
                    grads[key] = np.asarray(ig, dtype=np.float64).reshape(inp.shape)
                    owners[key] = inp
                    owned.discard(key)
                elif key in owned:
                    prev += ig
                else:
                    grads[key] = prev + ig
                    owned.add(key)
        for key, g in grads.items():
            if key not in owned:
                grads[key] = np.array(g, dtype=np.float64, copy=True)
        return Gradients(grads, owners)


def emit(name: str, out: np.ndarray, inputs: Iterable[Tensor], vjp: Callable) -> Tensor:
    """Wrap an op result, check it is finite and record it on the active tape."""
    if not np.isfinite(out).all():
        raise NumericError(name)
    t = Tensor._wrap(out)
    tape = active_tape()
    if tape is not None:
        inputs = tuple(inputs)
        if any(tape.is_tracked(i) for i in inputs):
            tape.record(name, t, inputs, vjp)
    return t


def backward(loss: Tensor, tape: Tape) -> Gradients:
    return tape.backward(loss)
