"""Dense containers, the Monarch permutation, and row-wise softmax/entropy.

Matrices are plain numpy arrays: ``Mat`` is a 2-D C-contiguous array and
``Tensor3`` a 3-D one. Kernel paths run in float32, oracle paths in float64.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from .errors import DimensionError, DomainError

Mat = np.ndarray
Tensor3 = np.ndarray

F32 = np.float32
F64 = np.float64


def as_mat(x, dtype=None, name: str = "x") -> Mat:
    """Validate ``x`` as a finite 2-D matrix, optionally casting it."""
    a = np.ascontiguousarray(x, dtype=dtype)
    if a.ndim != 2:
        raise DimensionError(f"{name} must be 2-D, got shape {a.shape}")
    if a.dtype.kind != "f":
        a = a.astype(F64)
    if not np.all(np.isfinite(a)):
        raise DomainError(f"{name} contains NaN or Inf")
    return a


def split_factors(n: int, b: int) -> int:
    if b < 1 or n < 1 or n % b:
        raise DimensionError(f"length {n} is not divisible by block width {b}")
    return n // b


@dataclass(frozen=True)
class Perm:
    """The reshape(m, b) -> transpose -> flatten permutation on ``n = m*b`` items.

    ``forward_index[i]`` is the source position of output position ``i``.
    """

    b: int
    n: int
    forward_index: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        m = split_factors(self.n, self.b)
        idx = np.arange(self.n).reshape(m, self.b).T.reshape(-1)
        object.__setattr__(self, "forward_index", idx)

    @property
    def m(self) -> int:
        return self.n // self.b

    @property
    def inverse_index(self) -> np.ndarray:
        inv = np.empty_like(self.forward_index)
        inv[self.forward_index] = np.arange(self.n)
        return inv

    def dual(self) -> "Perm":
        return Perm(self.m, self.n)

    def apply(self, v: np.ndarray) -> np.ndarray:
        v = np.asarray(v)
        if v.shape[0] != self.n:
            raise DimensionError(f"expected {self.n} rows, got {v.shape[0]}")
        return v[self.forward_index]

    def as_matrix(self, dtype=F64) -> Mat:
        """0/1 matrix P with ``P @ v == self.apply(v)``."""
        p = np.zeros((self.n, self.n), dtype=dtype)
        p[np.arange(self.n), self.forward_index] = 1
        return p


def permute_bn(v: np.ndarray, b: int) -> np.ndarray:
    """Reorder the rows of ``v`` by reshaping to (m, b), transposing, flattening.

    ``permute_bn(permute_bn(v, b), len(v) // b)`` restores ``v``.
    """
    v = np.asarray(v)
    if v.ndim == 0:
        raise DimensionError("permute_bn needs at least one axis")
    n = v.shape[0]
    m = split_factors(n, b)
    return v.reshape(m, b, *v.shape[1:]).swapaxes(0, 1).reshape(v.shape).copy()


def block_rows(x: Mat, m: int, b: int) -> Tensor3:
    """(m*b, d) -> (m, b, d); block k holds rows k*b .. k*b + b - 1."""
    if x.shape[0] != m * b:
        raise DimensionError(f"{x.shape[0]} rows cannot be viewed as {m}x{b}")
    return x.reshape(m, b, x.shape[1])


def block_cols(x: Mat, m: int, b: int) -> Tensor3:
    """(m*b, d) -> (b, m, d); entry [i, j] is row j*b + i."""
    return np.ascontiguousarray(block_rows(x, m, b).transpose(1, 0, 2))


def xlogx(p: np.ndarray) -> np.ndarray:
    """Elementwise p*log(p) with 0*log(0) = 0."""
    p = np.asarray(p)
    out = np.zeros_like(p)
    pos = p > 0
    out[pos] = p[pos] * np.log(p[pos])
    return out


def row_softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    x = np.asarray(x)
    if x.size == 0 or x.shape[axis] == 0:
        raise DimensionError("softmax over an empty axis")
    z = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


def row_entropy(p: np.ndarray, axis: int = -1) -> np.ndarray | float:
    """Shannon entropy in nats along ``axis``; scalar for a 1-D input."""
    p = np.asarray(p)
    if p.size == 0:
        raise DimensionError("entropy of an empty vector")
    if np.any(p < 0):
        raise DomainError("probabilities must be non-negative")
    h = -np.sum(xlogx(p), axis=axis)
    return float(h) if np.ndim(h) == 0 else h


# -- instrumentation ------------------------------------------------------


class MacCounter:
    def __init__(self):
        self.macs = 0

    def add(self, n: int) -> None:
        self.macs += int(n)


_counters: list[MacCounter] = []
_counter_lock = threading.Lock()


@contextmanager
def count_macs() -> Iterator[MacCounter]:
    """Record multiply-accumulates issued through :func:`mm` inside the block."""
    c = MacCounter()
    with _counter_lock:
        _counters.append(c)
    try:
        yield c
    finally:
        with _counter_lock:
            _counters.remove(c)


def mm(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Batched matmul that reports its MAC count to any active counter."""
    out = np.matmul(a, b)
    if _counters:
        n = out.size * a.shape[-1]
        with _counter_lock:
            for c in _counters:
                c.add(n)
    return out
