"""Training data: synthetic blobs, IDX files, Dirichlet splits, mini-batches."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

IDX_UBYTE = 0x08
MAX_PARTITION_RETRIES = 100
DEFAULT_BATCH_SIZE = 32


@dataclass(frozen=True)
class Dataset:
    features: np.ndarray  # (n_samples, d_in) float64
    labels: np.ndarray  # (n_samples,) int64
    num_classes: int

    def __post_init__(self):
        if self.features.ndim != 2:
            raise ValueError("features must be a 2-D matrix")
        if self.features.shape[0] != self.labels.shape[0]:
            raise ValueError("features and labels disagree on sample count")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    @property
    def input_dim(self) -> int:
        return int(self.features.shape[1])

    def subset(self, indices) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.features[idx], self.labels[idx], self.num_classes)


Partition = dict[int, np.ndarray]


def rng_stream(seed: int, *keys: int) -> np.random.Generator:
    """Independent generator for ``(seed, *keys)``, e.g. (seed, client, round, epoch)."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), *map(int, keys)]))


def class_means(d_in: int, classes: int, separation: float) -> np.ndarray:
    """Class ``c`` sits at ``(separation / sqrt 2) * (-1)**(c // d_in) * e_(c mod d_in)``.

    For ``classes <= d_in`` the means form a regular simplex whose pairwise
    distance is exactly ``separation``.
    """
    scale = separation / np.sqrt(2.0)
    means = np.zeros((classes, d_in))
    for c in range(classes):
        axis, flip = c % d_in, c // d_in
        means[c, axis] = scale * (-1.0) ** flip
    return means


def generate_synthetic(n: int, d_in: int, classes: int, separation: float, seed: int) -> Dataset:
    """Unit-variance Gaussian blobs, one per class, with balanced class sizes.

    Samples are shuffled so that classes interleave; labels cycle through the
    classes before shuffling, so counts differ by at most one.
    """
    if classes < 2 or n < classes:
        raise ValueError("need n >= classes >= 2")
    if d_in < 1:
        raise ValueError("d_in must be >= 1")
    if not separation > 0:
        raise ValueError("separation must be positive")
    rng = np.random.default_rng(seed)
    labels = np.arange(n, dtype=np.int64) % classes
    rng.shuffle(labels)
    means = class_means(d_in, classes, separation)
    features = means[labels] + rng.standard_normal((n, d_in))
    return Dataset(features, labels, classes)


class IdxFormatError(ValueError):
    pass


def parse_idx(data: bytes) -> tuple[list[int], np.ndarray]:
    """Decode an IDX buffer; only the unsigned-byte element type is accepted."""
    if len(data) < 4:
        raise IdxFormatError("buffer shorter than the 4-byte magic")
    if data[0] != 0 or data[1] != 0:
        raise IdxFormatError("bad magic: first two bytes must be zero")
    if data[2] != IDX_UBYTE:
        raise IdxFormatError(f"unsupported element type 0x{data[2]:02X}")
    ndim = data[3]
    header_end = 4 + 4 * ndim
    if len(data) < header_end:
        raise IdxFormatError("truncated dimension header")
    dims = list(struct.unpack(f">{ndim}I", data[4:header_end]))
    count = int(np.prod(dims, dtype=np.int64)) if dims else 1
    payload = data[header_end:]
    if len(payload) < count:
        raise IdxFormatError(f"truncated payload: expected {count} bytes, got {len(payload)}")
    arr = np.frombuffer(payload, dtype=np.uint8, count=count).copy()
    return dims, arr.reshape(dims) if dims else arr


def serialize_idx(dims, data) -> bytes:
    dims = [int(x) for x in dims]
    arr = np.asarray(data, dtype=np.uint8).reshape(-1)
    if arr.size != (int(np.prod(dims, dtype=np.int64)) if dims else 1):
        raise ValueError("data size does not match dims")
    header = bytes([0, 0, IDX_UBYTE, len(dims)]) + struct.pack(f">{len(dims)}I", *dims)
    return header + arr.tobytes()


def load_idx_dataset(images_path: str | Path, labels_path: str | Path, num_classes: int | None = None) -> Dataset:
    """Images are flattened per sample and scaled to [0, 1]."""
    dims, images = parse_idx(Path(images_path).read_bytes())
    ldims, labels = parse_idx(Path(labels_path).read_bytes())
    if len(ldims) != 1 or ldims[0] != dims[0]:
        raise IdxFormatError("label file does not match image count")
    features = images.reshape(dims[0], -1).astype(np.float64) / 255.0
    labels = labels.astype(np.int64)
    classes = num_classes if num_classes is not None else int(labels.max()) + 1
    return Dataset(features, labels, classes)


def _draw_partition(labels: np.ndarray, n_clients: int, theta: float, rng) -> list[list[int]]:
    buckets: list[list[int]] = [[] for _ in range(n_clients)]
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        rng.shuffle(idx)
        props = rng.dirichlet(np.full(n_clients, theta))
        cuts = (np.cumsum(props)[:-1] * idx.size).astype(np.int64)
        for client, part in enumerate(np.split(idx, cuts)):
            buckets[client].extend(part.tolist())
    return buckets


def dirichlet_partition(labels, n_clients: int, theta: float, seed: int) -> Partition:
    """Split sample indices so each class's share per client is Dirichlet(theta).

    A draw that leaves some client empty is discarded and redrawn with
    ``seed + 1``, ``seed + 2``, ... up to ``MAX_PARTITION_RETRIES`` times.
    """
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size == 0:
        raise ValueError("labels must be non-empty")
    if n_clients < 1:
        raise ValueError("n_clients must be >= 1")
    if not theta > 0:
        raise ValueError("theta must be positive")
    if labels.size < n_clients:
        raise ValueError("fewer samples than clients")
    for attempt in range(MAX_PARTITION_RETRIES + 1):
        buckets = _draw_partition(labels, n_clients, theta, np.random.default_rng(seed + attempt))
        if all(buckets):
            return {n: np.sort(np.asarray(b, dtype=np.int64)) for n, b in enumerate(buckets)}
    raise RuntimeError(f"could not give every client a sample after {MAX_PARTITION_RETRIES} retries")


def iid_partition(n_samples: int, n_clients: int, seed: int) -> Partition:
    """Uniform random split into near-equal shards."""
    if n_samples < n_clients:
        raise ValueError("fewer samples than clients")
    perm = np.random.default_rng(seed).permutation(n_samples)
    return {n: np.sort(part) for n, part in enumerate(np.array_split(perm, n_clients))}


def sample_minibatch(partition: Partition, client: int, batch_size: int, rng: np.random.Generator) -> np.ndarray:
    owned = partition[client]
    if batch_size < 1 or batch_size > owned.size:
        raise ValueError(f"batch_size {batch_size} outside [1, {owned.size}] for client {client}")
    return rng.choice(owned, size=batch_size, replace=False)


def default_batch_size(partition_size: int, cap: int = DEFAULT_BATCH_SIZE) -> int:
    return min(cap, partition_size)
