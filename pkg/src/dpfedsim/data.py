"""Datasets, client shards, IDX file loading, and deterministic partitioning."""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field

import numpy as np

_IDX_IMAGES_MAGIC = 2051
_IDX_LABELS_MAGIC = 2049


@dataclass(frozen=True)
class Example:
    """One labeled observation: float64 feature vector in [0, 1] plus class id."""

    features: np.ndarray
    label: int


@dataclass(frozen=True)
class Dataset:
    examples: list[Example] = field(default_factory=list)
    num_classes: int = 0

    def __post_init__(self):
        if not self.examples:
            raise ValueError("dataset must contain at least one example")
        if self.num_classes < 2:
            raise ValueError("dataset needs at least 2 classes")
        for ex in self.examples:
            if not 0 <= ex.label < self.num_classes:
                raise ValueError(
                    f"label {ex.label} out of range [0, {self.num_classes})"
                )

    @property
    def size(self) -> int:
        return len(self.examples)

    @property
    def feature_dim(self) -> int:
        return int(self.examples[0].features.shape[0])


@dataclass(frozen=True)
class ClientShard:
    """The slice of training data one simulated client holds."""

    client_id: int
    examples: list[Example]

    @property
    def size(self) -> int:
        return len(self.examples)


def features_matrix(examples: list[Example]) -> np.ndarray:
    return np.stack([ex.features for ex in examples])


def labels_array(examples: list[Example]) -> np.ndarray:
    return np.array([ex.label for ex in examples], dtype=np.int64)


def _read_exact(f, n: int, path: str, what: str) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise ValueError(f"{path}: truncated file while reading {what}")
    return buf


def load_idx(images_path: str, labels_path: str) -> Dataset:
    """Read an IDX image/label file pair (the MNIST container format).

    Both files are big-endian: images carry magic 2051 then count/rows/cols
    and count*rows*cols unsigned bytes; labels carry magic 2049 then count
    and count unsigned bytes.  Pixels are scaled to [0, 1] by /255 and each
    image is flattened row-major.
    """
    with open(images_path, "rb") as f:
        magic, count, rows, cols = struct.unpack(
            ">llll", _read_exact(f, 16, images_path, "image header")
        )
        if magic != _IDX_IMAGES_MAGIC:
            raise ValueError(
                f"{images_path}: bad magic {magic}, expected {_IDX_IMAGES_MAGIC} "
                "for an IDX image file"
            )
        raw = _read_exact(f, count * rows * cols, images_path, "image data")
    with open(labels_path, "rb") as f:
        magic, label_count = struct.unpack(
            ">ll", _read_exact(f, 8, labels_path, "label header")
        )
        if magic != _IDX_LABELS_MAGIC:
            raise ValueError(
                f"{labels_path}: bad magic {magic}, expected {_IDX_LABELS_MAGIC} "
                "for an IDX label file"
            )
        label_raw = _read_exact(f, label_count, labels_path, "label data")
    if count != label_count:
        raise ValueError(
            f"image/label count mismatch: {count} images vs {label_count} labels"
        )
    pixels = np.frombuffer(raw, dtype=np.uint8).astype(np.float64) / 255.0
    pixels = pixels.reshape(count, rows * cols)
    labels = np.frombuffer(label_raw, dtype=np.uint8).astype(np.int64)
    examples = [Example(pixels[i], int(labels[i])) for i in range(count)]
    return Dataset(examples, num_classes=int(labels.max()) + 1)


def synthetic_blobs(
    num_classes: int, per_class: int, dim: int, spread: float, seed: int
) -> Dataset:
    """Gaussian blobs: one deterministic unit-norm center per class.

    Features are clip((center + noise + 1) / 2, 0, 1): the affine shift maps
    the roughly [-1, 1] signal range onto [0, 1].  spread == 0 makes every
    example of a class identical.  Centers come first from the seeded stream
    (QR-orthonormalized when dim >= num_classes), so the same seed always
    yields the same dataset.
    """
    if num_classes < 2:
        raise ValueError("num_classes must be >= 2")
    if per_class < 1:
        raise ValueError("per_class must be >= 1")
    if dim < 1:
        raise ValueError("dim must be >= 1")
    if spread < 0:
        raise ValueError("spread must be >= 0")
    rng = np.random.default_rng(seed)
    raw = rng.standard_normal((dim, num_classes))
    if dim >= num_classes:
        q, _ = np.linalg.qr(raw)
        centers = q[:, :num_classes].T
    else:
        centers = raw.T / np.linalg.norm(raw.T, axis=1, keepdims=True)
    examples = []
    for c in range(num_classes):
        noise = (
            rng.standard_normal((per_class, dim)) * spread
            if spread > 0
            else np.zeros((per_class, dim))
        )
        feats = np.clip((centers[c] + noise + 1.0) / 2.0, 0.0, 1.0)
        examples.extend(Example(feats[i], c) for i in range(per_class))
    return Dataset(examples, num_classes=num_classes)


def partition_iid(dataset: Dataset, n_clients: int, seed: int) -> list[ClientShard]:
    """Shuffle once with the seed, then split into near-equal contiguous chunks.

    Chunk sizes differ by at most one, larger chunks first (101 examples over
    2 clients -> 51 and 50).
    """
    if not 1 <= n_clients <= dataset.size:
        raise ValueError(
            f"n_clients must be in [1, {dataset.size}], got {n_clients}"
        )
    rng = np.random.default_rng(seed)
    order = rng.permutation(dataset.size)
    chunks = np.array_split(order, n_clients)
    return [
        ClientShard(i, [dataset.examples[j] for j in chunk])
        for i, chunk in enumerate(chunks)
    ]


def partition_label_split(
    dataset: Dataset, label_groups: list[set[int]]
) -> list[ClientShard]:
    """Assign each client the examples whose label falls in its group.

    Groups must be disjoint and cover [0, num_classes) exactly; example order
    within a shard follows the dataset.
    """
    seen: set[int] = set()
    for group in label_groups:
        bad = [l for l in group if not 0 <= l < dataset.num_classes]
        if bad:
            raise ValueError(f"label {bad[0]} out of range [0, {dataset.num_classes})")
        overlap = seen & set(group)
        if overlap:
            raise ValueError(f"label groups overlap on {sorted(overlap)}")
        seen |= set(group)
    missing = set(range(dataset.num_classes)) - seen
    if missing:
        raise ValueError(f"label groups do not cover classes {sorted(missing)}")
    shards = []
    for i, group in enumerate(label_groups):
        members = [ex for ex in dataset.examples if ex.label in group]
        if not members:
            raise ValueError(f"label group {i} selects no examples")
        shards.append(ClientShard(i, members))
    return shards


def subsample(dataset: Dataset, n: int, seed: int) -> Dataset:
    """Stratified subsample of size n preserving class proportions.

    Per-class targets are floor(n * count_c / total); leftover slots go to
    classes by largest fractional remainder (ties to the smaller label).
    Selected examples keep their original dataset order.
    """
    if not 1 <= n <= dataset.size:
        raise ValueError(f"n must be in [1, {dataset.size}], got {n}")
    labels = labels_array(dataset.examples)
    counts = np.bincount(labels, minlength=dataset.num_classes)
    exact = n * counts / dataset.size
    targets = np.floor(exact).astype(np.int64)
    leftover = n - int(targets.sum())
    if leftover:
        remainders = exact - targets
        order = sorted(
            range(dataset.num_classes), key=lambda c: (-remainders[c], c)
        )
        for c in order[:leftover]:
            targets[c] += 1
    rng = np.random.default_rng(seed)
    chosen: list[int] = []
    for c in range(dataset.num_classes):
        pool = np.flatnonzero(labels == c)
        if targets[c] > pool.size:
            raise ValueError(
                f"class {c} has only {pool.size} examples, need {targets[c]}"
            )
        if targets[c]:
            chosen.extend(rng.choice(pool, size=int(targets[c]), replace=False))
    chosen.sort()
    return Dataset([dataset.examples[i] for i in chosen], dataset.num_classes)


def shard_fingerprint(shard: ClientShard) -> str:
    """sha256 over the shard's labels and raw feature bytes, for run comparison."""
    h = hashlib.sha256()
    h.update(str(shard.client_id).encode())
    for ex in shard.examples:
        h.update(int(ex.label).to_bytes(4, "big"))
        h.update(np.ascontiguousarray(ex.features, dtype=np.float64).tobytes())
    return h.hexdigest()
