"""IDX dataset loading, the staircase label-skew partition and rank assignment."""

from __future__ import annotations

import gzip
import logging
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .linalg import SeededRng
from .lora import rank_for_ratio

log = logging.getLogger(__name__)

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801
N_CLASSES = 10

# file names as distributed for MNIST and Fashion-MNIST
DEFAULT_FILES = {
    "train_images": "train-images-idx3-ubyte",
    "train_labels": "train-labels-idx1-ubyte",
    "test_images": "t10k-images-idx3-ubyte",
    "test_labels": "t10k-labels-idx1-ubyte",
}


class DataError(Exception):
    """Base class for dataset problems."""


class IdxMagicError(DataError):
    pass


class IdxTruncatedError(DataError):
    pass


class IdxCountMismatchError(DataError):
    pass


@dataclass
class Dataset:
    images: np.ndarray  # N x 784 float64 in [0, 1]
    labels: np.ndarray  # N int64 in [0, 10)

    def __post_init__(self):
        if self.images.shape[0] != self.labels.shape[0]:
            raise IdxCountMismatchError(
                f"{self.images.shape[0]} images but {self.labels.shape[0]} labels")

    def __len__(self) -> int:
        return self.labels.shape[0]

    def subset(self, n: int) -> "Dataset":
        return Dataset(self.images[:n], self.labels[:n])


def _read_bytes(path) -> bytes:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    if path.suffix == ".gz":
        raw = gzip.decompress(raw)
    return raw


def read_idx(path, expected_magic: int) -> np.ndarray:
    """Parse a big-endian IDX file of unsigned bytes into an array of its dims."""
    raw = _read_bytes(path)
    if len(raw) < 4:
        raise IdxTruncatedError(f"{path}: {len(raw)} bytes is too short for an IDX header")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise IdxMagicError(f"{path}: magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise IdxTruncatedError(f"{path}: header truncated")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    size = int(np.prod(dims))
    if len(raw) - header < size:
        raise IdxTruncatedError(f"{path}: {len(raw) - header} data bytes, expected {size}")
    return np.frombuffer(raw, dtype=np.uint8, count=size, offset=header).reshape(dims)


def write_idx(path, array: np.ndarray) -> None:
    """Write a uint8 array as an (uncompressed) IDX file."""
    array = np.ascontiguousarray(array, dtype=np.uint8)
    magic = 0x0800 | array.ndim
    with open(path, "wb") as f:
        f.write(struct.pack(">I", magic))
        f.write(struct.pack(f">{array.ndim}I", *array.shape))
        f.write(array.tobytes())


def load_idx(images_path, labels_path) -> Dataset:
    images = read_idx(images_path, IMAGE_MAGIC)
    labels = read_idx(labels_path, LABEL_MAGIC)
    if images.shape[0] != labels.shape[0]:
        raise IdxCountMismatchError(
            f"{images_path} has {images.shape[0]} images but {labels_path} has {labels.shape[0]} labels")
    if labels.size and labels.max() >= N_CLASSES:
        raise DataError(f"{labels_path}: label {labels.max()} out of range")
    x = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    return Dataset(x, labels.astype(np.int64))


def dataset_paths(directory) -> dict[str, Path]:
    directory = Path(directory)
    return {key: directory / name for key, name in DEFAULT_FILES.items()}


def default_data_dir(dataset: str) -> Path | None:
    root = os.environ.get("RBLA_DATA_DIR")
    return Path(root) / dataset if root else None


@dataclass(frozen=True)
class ClientPartition:
    client_id: int  # 1-based
    sample_indices: np.ndarray
    label_set: tuple[int, ...]
    rank_ratio: float

    @property
    def n_samples(self) -> int:
        return len(self.sample_indices)


def staircase_partition(labels, n_clients: int = 10, rng: SeededRng | None = None) -> list[ClientPartition]:
    """Client ``i`` (1-based) gets labels ``0..i-1``.

    Each label's samples are shuffled and split evenly among the clients
    allowed to hold it; the remainder goes one sample each to the
    highest-id clients. Accepts a :class:`Dataset` or a label array.
    """
    if isinstance(labels, Dataset):
        labels = labels.labels
    labels = np.asarray(labels)
    rng = rng or SeededRng(42)
    if not 1 <= n_clients <= N_CLASSES:
        raise ValueError(f"staircase partition supports 1..{N_CLASSES} clients, got {n_clients}")
    present = set(np.unique(labels).tolist())
    needed = set(range(n_clients))
    if not needed <= present:
        raise DataError(f"staircase over {n_clients} clients needs labels {sorted(needed)}, "
                        f"missing {sorted(needed - present)}")
    shares: dict[int, list[np.ndarray]] = {i: [] for i in range(1, n_clients + 1)}
    for label in range(n_clients):
        pool = np.flatnonzero(labels == label)
        pool = pool[rng.child("partition", label).permutation(len(pool))]
        eligible = list(range(label + 1, n_clients + 1))
        base, rem = divmod(len(pool), len(eligible))
        sizes = [base + (1 if j >= len(eligible) - rem else 0) for j in range(len(eligible))]
        start = 0
        for cid, size in zip(eligible, sizes):
            shares[cid].append(pool[start:start + size])
            start += size
    parts = []
    for cid in range(1, n_clients + 1):
        idx = np.sort(np.concatenate(shares[cid]))
        parts.append(ClientPartition(cid, idx, tuple(range(cid)), round(0.1 * cid, 10)))
    return parts


def assign_ranks(partitions, layer_shapes) -> dict[int, list[int]]:
    """Per-client LoRA rank of every layer from the client's rank ratio."""
    return {p.client_id: [rank_for_ratio(p.rank_ratio, m, n) for m, n in layer_shapes]
            for p in partitions}


def label_histogram(labels, indices) -> np.ndarray:
    return np.bincount(np.asarray(labels)[indices], minlength=N_CLASSES)
