"""Server-side aggregation: rank-based (RBLA), zero-padding and plain FedAvg.

All reductions run in ascending ``client_id`` order with per-slice normalized
coefficients, so results do not depend on the order updates arrive in and a
slice held by a single client passes through bit-exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .linalg import ShapeError
from .lora import LoraAdapter


class AggregationDefect(RuntimeError):
    """A rank slice ended up with no contributor and no fallback value."""


@dataclass
class ClientUpdate:
    client_id: int
    layers: list  # LoraAdapter per layer, or full weight matrices in FFT mode
    biases: list[np.ndarray]
    weight: float
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.weight > 0:
            raise ValueError(f"client {self.client_id}: aggregation weight must be > 0, got {self.weight}")
        if len(self.layers) != len(self.biases):
            raise ShapeError(f"client {self.client_id}: {len(self.layers)} layers but {len(self.biases)} biases")

    def rank(self, layer: int) -> int:
        return self.layers[layer].rank


def _check_weights(weights) -> np.ndarray:
    w = np.asarray(weights, dtype=np.float64)
    if w.ndim != 1 or w.size == 0:
        raise ValueError("need at least one aggregation weight")
    if not np.all(w > 0):
        raise ValueError(f"aggregation weights must be positive, got {w.tolist()}")
    return w


def fedavg(params, weights) -> np.ndarray:
    """Weighted average ``sum(w_i * P_i) / sum(w_i)`` of same-shape matrices."""
    if len(params) == 0:
        raise ValueError("fedavg needs at least one matrix")
    w = _check_weights(weights)
    if len(w) != len(params):
        raise ValueError(f"{len(params)} matrices but {len(w)} weights")
    shape = params[0].shape
    for p in params:
        if p.shape != shape:
            raise ShapeError(f"fedavg shape mismatch: {p.shape} vs {shape}")
    coef = w / w.sum()
    out = np.zeros(shape)
    for c, p in zip(coef, params):
        out += c * p
    return out


def slice_indicator(ranks, r_max: int) -> np.ndarray:
    """``delta[i, r] = 1`` iff client ``i`` holds rank slice ``r``."""
    ranks = np.asarray(ranks)
    return (np.arange(r_max)[None, :] < ranks[:, None]).astype(np.float64)


def _sorted(updates):
    if len(updates) == 0:
        raise ValueError("need at least one client update")
    ids = [u.client_id for u in updates]
    if len(set(ids)) != len(ids):
        raise ValueError(f"duplicate client ids in {ids}")
    return sorted(updates, key=lambda u: u.client_id)


def _layer_adapters(updates, layer):
    ads = [u.layers[layer] for u in updates]
    shape = ads[0].layer_shape
    for u, ad in zip(updates, ads):
        if not isinstance(ad, LoraAdapter):
            raise TypeError(f"client {u.client_id} layer {layer} is not a LoRA adapter")
        if ad.layer_shape != shape:
            raise ShapeError(f"client {u.client_id} layer {layer} shape {ad.layer_shape} != {shape}")
    return ads


def _combine(ads, coef, r_out):
    """Slice-wise ``sum_i coef[i, r] * slice_i(r)`` over the first ``r_out`` slices."""
    m, n = ads[0].layer_shape
    B = np.zeros((m, r_out))
    A = np.zeros((r_out, n))
    for ad, c in zip(ads, coef):
        k = min(ad.rank, r_out)
        B[:, :k] += ad.B[:, :k] * c[:k]
        A[:k, :] += ad.A[:k, :] * c[:k, None]
    return B, A


def rbla_aggregate(updates, layer: int, target_rank: int | None = None,
                   previous: LoraAdapter | None = None) -> LoraAdapter:
    """Rank-based aggregation of one layer's adapters.

    Slice ``r`` becomes the weighted mean over the clients that hold it only:
    ``sum_i d(i,r) w_i s_i(r) / sum_i d(i,r) w_i``. ``B`` columns and ``A``
    rows use the same indicator. The result has ``target_rank`` slices
    (default: the largest rank among ``updates``); slices that no update
    holds are copied from ``previous`` and raise :class:`AggregationDefect`
    when there is no previous value to keep.
    """
    updates = _sorted(updates)
    ads = _layer_adapters(updates, layer)
    ranks = [ad.rank for ad in ads]
    r_out = max(ranks) if target_rank is None else target_rank
    w = _check_weights([u.weight for u in updates])
    delta = slice_indicator(ranks, r_out)
    dw = delta * w[:, None]
    den = dw.sum(axis=0)
    covered = den > 0
    coef = np.divide(dw, den, out=np.zeros_like(dw), where=covered)
    B, A = _combine(ads, coef, r_out)
    if not covered.all():
        missing = np.flatnonzero(~covered)
        if previous is None or previous.rank <= missing.max() or previous.layer_shape != ads[0].layer_shape:
            raise AggregationDefect(f"layer {layer}: rank slices {missing.tolist()} have no contributor")
        B[:, missing] = previous.B[:, missing]
        A[missing, :] = previous.A[missing, :]
    return LoraAdapter(B, A)


def zp_aggregate(updates, layer: int) -> LoraAdapter:
    """Zero-padding aggregation of one layer's adapters.

    Every adapter is padded with zero slices to the largest rank among
    ``updates`` and slice ``r`` becomes ``sum_i w_i d(i,r) s_i(r) / sum_i w_i``:
    the denominator counts every client, so slices held by few clients are
    scaled down.
    """
    updates = _sorted(updates)
    ads = _layer_adapters(updates, layer)
    ranks = [ad.rank for ad in ads]
    r_out = max(ranks)
    w = _check_weights([u.weight for u in updates])
    coef = slice_indicator(ranks, r_out) * (w / w.sum())[:, None]
    B, A = _combine(ads, coef, r_out)
    return LoraAdapter(B, A)


def fft_aggregate(updates, layer: int) -> np.ndarray:
    updates = _sorted(updates)
    return fedavg([u.layers[layer] for u in updates], [u.weight for u in updates])


def aggregate_biases(updates, layer: int) -> np.ndarray:
    updates = _sorted(updates)
    return fedavg([u.biases[layer] for u in updates], [u.weight for u in updates])


def zero_pad(mat: np.ndarray, target_rows: int, target_cols: int) -> np.ndarray:
    """Place ``mat`` in the top-left corner of a zero matrix of the target shape."""
    p, q = mat.shape
    if target_rows < p or target_cols < q:
        raise ShapeError(f"cannot pad {mat.shape} down to ({target_rows}, {target_cols})")
    out = np.zeros((target_rows, target_cols))
    out[:p, :q] = mat
    return out
