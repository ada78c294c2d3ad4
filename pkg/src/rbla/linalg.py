"""Dense matrix helpers and the seeded random streams used across the simulator.

A matrix is a 2-D ``float64`` numpy array in C (row-major) order. The helpers
here validate shapes and always return fresh arrays, so callers never alias an
input they passed in.
"""

from __future__ import annotations

import hashlib
import struct

import numpy as np

DTYPE = np.float64


class ShapeError(ValueError):
    """Raised when matrix dimensions are incompatible for an operation."""


def as_matrix(values, copy: bool = True) -> np.ndarray:
    """Coerce ``values`` into a 2-D float64 C-ordered array."""
    arr = np.array(values, dtype=DTYPE, copy=copy, order="C", ndmin=2)
    if arr.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got {arr.ndim}-D input")
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ShapeError(f"matrix dimensions must be >= 1, got {arr.shape}")
    return arr


def frozen(values) -> np.ndarray:
    """Return a read-only float64 copy of ``values``."""
    arr = as_matrix(values)
    arr.flags.writeable = False
    return arr


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    return np.matmul(a, b)


def transpose(a: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(a.T)


def row_block(a: np.ndarray, r0: int, r1: int) -> np.ndarray:
    """Copy of rows ``[r0, r1)``."""
    if not 0 <= r0 < r1 <= a.shape[0]:
        raise ShapeError(f"row range [{r0}, {r1}) invalid for shape {a.shape}")
    return a[r0:r1, :].copy()


def col_block(a: np.ndarray, c0: int, c1: int) -> np.ndarray:
    """Copy of columns ``[c0, c1)``."""
    if not 0 <= c0 < c1 <= a.shape[1]:
        raise ShapeError(f"column range [{c0}, {c1}) invalid for shape {a.shape}")
    return np.ascontiguousarray(a[:, c0:c1])


def axpy(alpha: float, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    if x.shape != y.shape:
        raise ShapeError(f"axpy shape mismatch: {x.shape} vs {y.shape}")
    return alpha * x + y


def _stream_key(labels: tuple) -> int:
    h = hashlib.sha256()
    for label in labels:
        if isinstance(label, bool) or not isinstance(label, (int, str)):
            raise TypeError(f"stream labels must be int or str, got {label!r}")
        tag = b"i" if isinstance(label, int) else b"s"
        raw = str(label).encode()
        h.update(tag + struct.pack(">I", len(raw)) + raw)
    return int.from_bytes(h.digest()[:8], "big")


class SeededRng:
    """Counter-based random stream identified by ``(seed, stream_id)``.

    Backed by Philox, so a stream's output depends only on its key and never
    on how many other streams were drawn from before it. ``child`` derives a
    new independent stream from string/int labels, e.g.
    ``rng.child("shuffle", client_id, round_index)``.
    """

    def __init__(self, seed: int, stream_id: int = 0):
        if not (0 <= seed < 2**64 and 0 <= stream_id < 2**64):
            raise ValueError("seed and stream_id must fit in 64 unsigned bits")
        self.seed = int(seed)
        self.stream_id = int(stream_id)
        key = np.array([self.seed, self.stream_id], dtype=np.uint64)
        self.generator = np.random.Generator(np.random.Philox(key=key))

    def child(self, *labels) -> "SeededRng":
        return SeededRng(self.seed, _stream_key((self.stream_id,) + labels))

    def permutation(self, n: int) -> np.ndarray:
        return self.generator.permutation(n)

    def __repr__(self) -> str:
        return f"SeededRng(seed={self.seed}, stream_id={self.stream_id})"


def rng_normal(rng: SeededRng, rows: int, cols: int, mean: float = 0.0,
               std: float = 1.0) -> np.ndarray:
    """Gaussian matrix drawn from a *fresh* copy of ``rng``'s stream.

    Two calls with the same stream therefore return identical matrices.
    """
    if std < 0:
        raise ValueError(f"std must be non-negative, got {std}")
    if rows < 1 or cols < 1:
        raise ShapeError(f"matrix dimensions must be >= 1, got ({rows}, {cols})")
    gen = SeededRng(rng.seed, rng.stream_id).generator
    return mean + std * gen.standard_normal((rows, cols), dtype=DTYPE)
