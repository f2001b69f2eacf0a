"""Dense float32 tensors with NCHW semantics and the layout algebra on top.

Tensors are immutable: the backing array is marked read-only on
construction. Every physical layout change (``permute``, window
partitioning) is reported to the active :class:`LayoutCounter`, if any, so
instrumentation can count reshuffles per forward pass.
"""

from __future__ import annotations

import contextlib
import contextvars
import math
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

from .errors import ShapeError

__all__ = [
    "Tensor",
    "LayoutCounter",
    "count_layout_changes",
    "record_layout_change",
    "reshape",
    "permute",
    "elementwise",
    "matmul",
    "chunk_channels",
    "concat_channels",
]

MAX_RANK = 4


class Tensor:
    """Row-major float32 array of rank 1..4."""

    __slots__ = ("data",)

    def __init__(self, data):
        arr = np.array(data, dtype=np.float32, order="C", copy=True)
        if not 1 <= arr.ndim <= MAX_RANK:
            raise ShapeError(f"rank must be between 1 and {MAX_RANK}, got {arr.ndim}")
        if any(e < 1 for e in arr.shape):
            raise ShapeError(f"all extents must be >= 1, got {arr.shape}")
        arr.flags.writeable = False
        self.data = arr

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        # Fast path for arrays we produced ourselves; still enforces the invariants.
        if arr.dtype != np.float32 or not arr.flags.c_contiguous:
            return cls(arr)
        if not 1 <= arr.ndim <= MAX_RANK or 0 in arr.shape:
            raise ShapeError(f"invalid tensor shape {arr.shape}")
        t = cls.__new__(cls)
        if arr.flags.writeable:
            arr.flags.writeable = False
        t.data = arr
        return t

    @classmethod
    def zeros(cls, shape) -> "Tensor":
        return cls._wrap(np.zeros(tuple(shape), dtype=np.float32))

    @classmethod
    def full(cls, shape, value: float) -> "Tensor":
        return cls._wrap(np.full(tuple(shape), value, dtype=np.float32))

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def rank(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        """Read-only view of the underlying float32 buffer."""
        return self.data

    def bit_equal(self, other: "Tensor") -> bool:
        return self.shape == other.shape and self.data.tobytes() == other.data.tobytes()

    def __repr__(self):
        return f"Tensor(shape={self.shape})"

    def __eq__(self, other):
        if not isinstance(other, Tensor):
            return NotImplemented
        return self.bit_equal(other)

    __hash__ = None


@dataclass
class LayoutCounter:
    """Tally of physical layout changes, optionally broken down by op name."""

    total: int = 0
    by_op: dict = field(default_factory=dict)

    def add(self, op: str, n: int = 1):
        self.total += n
        self.by_op[op] = self.by_op.get(op, 0) + n


_active_counter: contextvars.ContextVar = contextvars.ContextVar("iformer_layout_counter", default=None)


@contextlib.contextmanager
def count_layout_changes() -> Iterator[LayoutCounter]:
    """Collect layout changes made in the current context.

    Counters are context-local (one per thread / task), so concurrent
    forwards never share a tally. Nested blocks each see their own counts;
    the outer counter also receives the inner ones.
    """
    outer = _active_counter.get()
    counter = LayoutCounter()
    token = _active_counter.set(counter)
    try:
        yield counter
    finally:
        _active_counter.reset(token)
        if outer is not None:
            outer.total += counter.total
            for k, v in counter.by_op.items():
                outer.by_op[k] = outer.by_op.get(k, 0) + v


def record_layout_change(op: str, n: int = 1):
    counter = _active_counter.get()
    if counter is not None:
        counter.add(op, n)


def reshape(t: Tensor, new_shape: Sequence[int]) -> Tensor:
    new_shape = tuple(int(e) for e in new_shape)
    if math.prod(new_shape) != t.size:
        raise ShapeError(f"cannot reshape {t.shape} ({t.size} elements) to {new_shape}")
    # contiguous -> contiguous reshape is metadata only; no layout change recorded
    return Tensor._wrap(t.data.reshape(new_shape))


def permute(t: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(int(a) for a in axes)
    if sorted(axes) != list(range(t.rank)):
        raise ShapeError(f"{axes} is not a permutation of 0..{t.rank - 1}")
    record_layout_change("permute")
    return Tensor._wrap(np.ascontiguousarray(t.data.transpose(axes)))


def _broadcast_operand(a: Tensor, b: Tensor) -> np.ndarray:
    if a.shape == b.shape:
        return b.data
    # per-channel vector over N,C[,H,W]
    if b.rank == 1 and a.rank >= 2 and b.shape[0] == a.shape[1]:
        return b.data.reshape((1, -1) + (1,) * (a.rank - 2))
    raise ShapeError(f"incompatible shapes {a.shape} and {b.shape}")


def elementwise(a: Tensor, b: Tensor, op: str) -> Tensor:
    """``a op b`` for op in {"add", "mul"}; ``b`` may be a per-channel vector."""
    rhs = _broadcast_operand(a, b)
    if op == "add":
        out = np.add(a.data, rhs, dtype=np.float32)
    elif op == "mul":
        out = np.multiply(a.data, rhs, dtype=np.float32)
    else:
        raise ValueError(f"unknown elementwise op {op!r}")
    return Tensor._wrap(out)


def matmul(a: Tensor, b: Tensor, trans_a: bool = False, trans_b: bool = False) -> Tensor:
    """Matrix product of rank-2 operands, or rank-3 with a shared batch extent.

    ``trans_a``/``trans_b`` read the operand transposed, the way a GEMM
    kernel does; no layout change takes place.
    """
    if a.rank != b.rank or a.rank not in (2, 3):
        raise ShapeError(f"matmul expects two rank-2 or two rank-3 operands, got {a.shape} and {b.shape}")
    if a.rank == 3 and a.shape[0] != b.shape[0]:
        raise ShapeError(f"batch extents differ: {a.shape[0]} vs {b.shape[0]}")
    x = np.swapaxes(a.data, -1, -2) if trans_a else a.data
    y = np.swapaxes(b.data, -1, -2) if trans_b else b.data
    if x.shape[-1] != y.shape[-2]:
        raise ShapeError(f"inner extents differ: {x.shape} @ {y.shape}")
    return Tensor._wrap(np.ascontiguousarray(np.matmul(x, y)))


def chunk_channels(t: Tensor, n: int) -> list:
    if t.rank < 2:
        raise ShapeError("chunk_channels needs a channel axis")
    c = t.shape[1]
    if n < 1 or c % n:
        raise ShapeError(f"{c} channels cannot be split into {n} equal chunks")
    k = c // n
    return [Tensor._wrap(np.ascontiguousarray(t.data[:, i * k:(i + 1) * k])) for i in range(n)]


def concat_channels(parts: Sequence[Tensor]) -> Tensor:
    if not parts:
        raise ShapeError("nothing to concatenate")
    ref = parts[0].shape
    for p in parts[1:]:
        if p.rank != len(ref) or p.shape[0] != ref[0] or p.shape[2:] != ref[2:]:
            raise ShapeError(f"cannot concatenate {p.shape} with {ref} along channels")
    return Tensor._wrap(np.concatenate([p.data for p in parts], axis=1))
