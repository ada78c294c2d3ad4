"""Low-rank adapters over a frozen dense base.

The effective weight of an adapted layer is ``W0 + scale * B @ A`` with
``W0`` of shape ``(m, n)`` (``m`` inputs, ``n`` outputs), ``B`` of shape
``(m, r)`` and ``A`` of shape ``(r, n)``. Rank slice ``i`` is the pair
(column ``i`` of ``B``, row ``i`` of ``A``); nothing in this module reorders
slices, so truncation keeps a prefix and embedding appends zero slices.
"""

from __future__ import annotations

from dataclasses import dataclass
from decimal import ROUND_HALF_UP, Decimal

import numpy as np

from .linalg import SeededRng, ShapeError, as_matrix, frozen, rng_normal
from .nn import RELU


class RankError(ValueError):
    """Raised for a rank outside the range an operation allows."""


@dataclass(frozen=True)
class FrozenBase:
    W0: np.ndarray

    def __post_init__(self):
        if self.W0.flags.writeable:
            object.__setattr__(self, "W0", frozen(self.W0))

    @property
    def shape(self) -> tuple[int, int]:
        return self.W0.shape


@dataclass
class LoraAdapter:
    B: np.ndarray  # m x r
    A: np.ndarray  # r x n

    def __post_init__(self):
        self.B = as_matrix(self.B, copy=False)
        self.A = as_matrix(self.A, copy=False)
        if self.B.shape[1] != self.A.shape[0]:
            raise ShapeError(f"B {self.B.shape} and A {self.A.shape} disagree on rank")
        m, n = self.layer_shape
        if not 1 <= self.rank <= min(m, n):
            raise RankError(f"rank {self.rank} outside [1, {min(m, n)}] for layer {m}x{n}")

    @property
    def rank(self) -> int:
        return self.A.shape[0]

    @property
    def layer_shape(self) -> tuple[int, int]:
        return self.B.shape[0], self.A.shape[1]

    def copy(self) -> "LoraAdapter":
        return LoraAdapter(self.B.copy(), self.A.copy())

    def delta(self) -> np.ndarray:
        return self.B @ self.A


def rank_for_ratio(ratio: float, m: int, n: int) -> int:
    """``max(1, round_half_up(ratio * min(m, n)))``, capped at ``min(m, n)``."""
    if not 0 < ratio <= 1:
        raise RankError(f"rank ratio must lie in (0, 1], got {ratio}")
    full = min(m, n)
    # Decimal on the printed ratio avoids 0.1 * 3 * 200 style binary drift
    r = int((Decimal(repr(ratio)) * full).quantize(Decimal(1), rounding=ROUND_HALF_UP))
    return min(full, max(1, r))


def init_adapter(rng: SeededRng, m: int, n: int, r: int) -> LoraAdapter:
    """``A`` ~ N(0, variance 1/r), ``B`` = 0, so the initial update ``B @ A`` is zero."""
    if not 1 <= r <= min(m, n):
        raise RankError(f"rank {r} outside [1, {min(m, n)}] for layer {m}x{n}")
    A = rng_normal(rng, r, n, 0.0, 1.0 / np.sqrt(r))
    return LoraAdapter(np.zeros((m, r)), A)


def effective_weight(base: FrozenBase, ad: LoraAdapter, scale: float = 1.0) -> np.ndarray:
    if base.shape != ad.layer_shape:
        raise ShapeError(f"base {base.shape} does not match adapter layer {ad.layer_shape}")
    if scale == 1.0:
        return base.W0 + ad.B @ ad.A
    return base.W0 + scale * (ad.B @ ad.A)


def truncate(ad: LoraAdapter, r_new: int) -> LoraAdapter:
    """Keep the first ``r_new`` slices (copies)."""
    if not 1 <= r_new <= ad.rank:
        raise RankError(f"cannot truncate rank {ad.rank} adapter to {r_new}")
    return LoraAdapter(ad.B[:, :r_new].copy(), ad.A[:r_new, :].copy())


def embed(ad: LoraAdapter, r_target: int) -> LoraAdapter:
    """Append zero slices up to ``r_target``; ``B @ A`` is unchanged."""
    if r_target < ad.rank:
        raise RankError(f"cannot embed rank {ad.rank} adapter into rank {r_target}")
    m, n = ad.layer_shape
    B = np.zeros((m, r_target))
    A = np.zeros((r_target, n))
    B[:, :ad.rank] = ad.B
    A[:ad.rank, :] = ad.A
    return LoraAdapter(B, A)


def lora_backward(base: FrozenBase, ad: LoraAdapter, dW_eff: np.ndarray, scale: float = 1.0):
    """Chain rule through ``W0 + scale * B @ A``: returns ``(dB, dA)``."""
    if dW_eff.shape != base.shape or base.shape != ad.layer_shape:
        raise ShapeError(f"dW_eff {dW_eff.shape}, base {base.shape}, adapter {ad.layer_shape} disagree")
    dB = dW_eff @ ad.A.T
    dA = ad.B.T @ dW_eff
    if scale != 1.0:
        dB *= scale
        dA *= scale
    return dB, dA


class LoraDense:
    """Dense layer whose weight is a frozen base plus a trainable adapter.

    The forward pass never materializes ``B @ A``: it computes
    ``x @ W0 + ((x @ B) @ A) * scale + b``, and the backward pass forms the
    factor gradients from ``x @ B`` and ``delta @ A.T``. Both equal the
    matrix-level rule in :func:`lora_backward` applied to ``x.T @ delta``.
    """

    def __init__(self, base: FrozenBase, adapter: LoraAdapter, b: np.ndarray,
                 activation: str = RELU, scale: float = 1.0):
        if base.shape != adapter.layer_shape:
            raise ShapeError(f"base {base.shape} does not match adapter layer {adapter.layer_shape}")
        self.base = base
        self.adapter = adapter
        self.b = as_matrix(b)
        if self.b.shape != (1, base.shape[1]):
            raise ShapeError(f"bias shape {self.b.shape} does not match layer {base.shape}")
        self.activation = activation
        self.scale = float(scale)
        self._xB = None

    @property
    def shape(self) -> tuple[int, int]:
        return self.base.shape

    def affine(self, x):
        xB = x @ self.adapter.B
        self._xB = (x, xB)
        low = xB @ self.adapter.A
        if self.scale != 1.0:
            low *= self.scale
        return x @ self.base.W0 + low + self.b

    def backprop(self, x, delta, need_dx=True):
        ad = self.adapter
        if self._xB is not None and self._xB[0] is x:
            xB = self._xB[1]
        else:
            xB = x @ ad.B
        dA_ = delta @ ad.A.T  # batch x r
        dB = x.T @ dA_
        dA = xB.T @ delta
        if self.scale != 1.0:
            dB *= self.scale
            dA *= self.scale
        grads = {"B": dB, "A": dA, "b": delta.sum(axis=0, keepdims=True)}
        dx = None
        if need_dx:
            low = dA_ @ ad.B.T
            if self.scale != 1.0:
                low *= self.scale
            dx = delta @ self.base.W0.T + low
        return grads, dx

    def params(self) -> dict[str, np.ndarray]:
        return {"B": self.adapter.B, "A": self.adapter.A, "b": self.b}

    def effective_weight(self) -> np.ndarray:
        return effective_weight(self.base, self.adapter, self.scale)
