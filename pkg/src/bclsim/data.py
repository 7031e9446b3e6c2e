"""Datasets, client partitioning, and trigger poisoning.

Supports IDX image/label pairs (the MNIST family on disk, gzipped or raw)
and a seeded synthetic generator producing 10-class Gaussian-blob images,
plus the q-non-IID client partitioner and the clean/poisoned split
construction used by the attacks.
"""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass, field, replace

import numpy as np

__all__ = [
    "FormatError", "LabeledSet", "SyntheticSpec", "PoisonSpec", "PartitionPlan",
    "load_idx_pair", "load_dataset", "generate_synthetic", "partition",
    "embed_trigger", "embed_trigger_batch", "dba_subtrigger",
    "build_poison_splits", "poison_testset", "stratified_subset",
]

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801

FULL_TRIGGER = frozenset((r, c) for r in range(5) for c in range(5))


class FormatError(ValueError):
    """Malformed IDX file (bad magic, truncated payload)."""


@dataclass(frozen=True)
class LabeledSet:
    """Images (N, H, W, C) in [0, 1] with integer labels in [0, num_classes)."""

    images: np.ndarray
    labels: np.ndarray
    num_classes: int = 10

    def __post_init__(self):
        images = np.asarray(self.images, dtype=np.float32)
        labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if images.ndim == 3:  # accept (N, H, W) grayscale
            images = images[..., None]
        if images.ndim != 4:
            raise ValueError(f"images must be (N, H, W, C), got shape {images.shape}")
        if len(images) != len(labels):
            raise ValueError(f"{len(images)} images but {len(labels)} labels")
        if len(images) and (images.min() < 0.0 or images.max() > 1.0):
            raise ValueError("pixel values outside [0, 1]")
        if len(labels) and (labels.min() < 0 or labels.max() >= self.num_classes):
            raise ValueError("label outside [0, num_classes)")
        object.__setattr__(self, "images", images)
        object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def take(self, indices) -> "LabeledSet":
        idx = np.asarray(indices, dtype=np.int64)
        return LabeledSet(self.images[idx], self.labels[idx], self.num_classes)


# -- IDX loading --------------------------------------------------------

def _open_maybe_gzip(path):
    with open(path, "rb") as probe:
        head = probe.read(2)
    if head == b"\x1f\x8b":
        return gzip.open(path, "rb")
    return open(path, "rb")


def _read_idx(path, magic_expected: int, header_dims: int) -> np.ndarray:
    with _open_maybe_gzip(path) as f:
        header = f.read(4 * (1 + header_dims))
        if len(header) != 4 * (1 + header_dims):
            raise FormatError(f"{path}: truncated IDX header")
        magic, *dims = struct.unpack(f">{1 + header_dims}I", header)
        if magic != magic_expected:
            raise FormatError(f"{path}: bad IDX magic 0x{magic:08x}")
        count = int(np.prod(dims))
        payload = f.read(count)
        if len(payload) != count:
            raise FormatError(f"{path}: expected {count} bytes, got {len(payload)}")
        return np.frombuffer(payload, dtype=np.uint8).reshape(dims)


def load_idx_pair(images_path, labels_path, num_classes: int = 10) -> LabeledSet:
    """Load an IDX image/label file pair, scaling pixels to [0, 1]."""
    images = _read_idx(images_path, IDX_IMAGE_MAGIC, 3)
    labels = _read_idx(labels_path, IDX_LABEL_MAGIC, 1)
    if len(images) != len(labels):
        raise FormatError(
            f"image/label count mismatch: {len(images)} vs {len(labels)}")
    if labels.max(initial=0) >= num_classes:
        raise ValueError(f"label {labels.max()} outside [0, {num_classes})")
    return LabeledSet(images.astype(np.float32) / 255.0, labels, num_classes)


# -- synthetic generator ------------------------------------------------

@dataclass(frozen=True)
class SyntheticSpec:
    """Seeded 10-class Gaussian-blob image generator.

    Each class owns a blob center on a ring; samples jitter the center by
    whole pixels and add Gaussian pixel noise, so classes overlap enough
    that the main task is learnable but not trivial.
    """

    n_samples: int
    num_classes: int = 10
    height: int = 28
    width: int = 28
    blob_sigma: float = 2.5
    ring_radius: float = 8.0
    jitter: int = 2
    noise: float = 0.15
    seed: int = 0


def generate_synthetic(spec: SyntheticSpec) -> LabeledSet:
    if spec.n_samples <= 0:
        raise ValueError("synthetic spec requires n_samples >= 1")
    rng = np.random.default_rng(spec.seed)
    h, w, x = spec.height, spec.width, spec.num_classes
    angles = 2 * np.pi * np.arange(x) / x
    cy = h / 2 - 0.5 + spec.ring_radius * np.sin(angles)
    cx = w / 2 - 0.5 + spec.ring_radius * np.cos(angles)
    labels = rng.integers(0, x, size=spec.n_samples)
    jy = rng.integers(-spec.jitter, spec.jitter + 1, size=spec.n_samples)
    jx = rng.integers(-spec.jitter, spec.jitter + 1, size=spec.n_samples)
    amp = rng.uniform(0.75, 1.0, size=spec.n_samples)
    rows = np.arange(h)[None, :, None]
    cols = np.arange(w)[None, None, :]
    yy = cy[labels][:, None, None] + jy[:, None, None]
    xx = cx[labels][:, None, None] + jx[:, None, None]
    d2 = (rows - yy) ** 2 + (cols - xx) ** 2
    images = amp[:, None, None] * np.exp(-d2 / (2 * spec.blob_sigma ** 2))
    images += rng.normal(0.0, spec.noise, size=images.shape)
    images = np.clip(images, 0.0, 1.0).astype(np.float32)[..., None]
    return LabeledSet(images, labels, x)


def load_dataset(source) -> LabeledSet:
    """Load from a SyntheticSpec or an (images_path, labels_path) pair."""
    if isinstance(source, SyntheticSpec):
        return generate_synthetic(source)
    if isinstance(source, (tuple, list)) and len(source) == 2:
        return load_idx_pair(source[0], source[1])
    raise TypeError(f"unsupported dataset source: {source!r}")


# -- client partitioning -------------------------------------------------

@dataclass(frozen=True)
class PartitionPlan:
    n_clients: int
    q: float
    seed: int
    client_indices: tuple  # tuple of np.int64 arrays, disjoint, covering

    def __post_init__(self):
        object.__setattr__(
            self, "client_indices",
            tuple(np.asarray(ix, dtype=np.int64) for ix in self.client_indices))

    def __len__(self) -> int:
        return self.n_clients


def partition(data: LabeledSet, n_clients: int, q: float, seed: int) -> PartitionPlan:
    """q-non-IID label-skew partition.

    Samples of class x go to group x with probability q and to each other
    group with probability (1-q)/(X-1); client i serves group i mod X, and
    a group's samples are dealt uniformly over its clients.  q = 1/X is
    the IID-uniform point.
    """
    if n_clients < 1:
        raise ValueError("need at least one client")
    if not 0.0 <= q <= 1.0:
        raise ValueError("q must be in [0, 1]")
    if n_clients > len(data):
        raise ValueError(f"{n_clients} clients but only {len(data)} samples")
    x = data.num_classes
    rng = np.random.default_rng(seed)
    n = len(data)
    groups = data.labels.copy()
    move = rng.random(n) >= q
    if x > 1:
        other = rng.integers(0, x - 1, size=n)
        other = other + (other >= data.labels)
        groups[move] = other[move]
    group_clients = [[i for i in range(n_clients) if i % x == g] for g in range(x)]
    client_indices: list[list[int]] = [[] for _ in range(n_clients)]
    orphans: list[int] = []
    for g in range(x):
        members = np.flatnonzero(groups == g)
        members = members[rng.permutation(len(members))]
        cl = group_clients[g]
        if not cl:
            orphans.extend(members.tolist())
            continue
        for k, s in enumerate(members):
            client_indices[cl[k % len(cl)]].append(int(s))
    for k, s in enumerate(orphans):  # only when n_clients < num_classes
        client_indices[k % n_clients].append(s)
    return PartitionPlan(n_clients, q, seed,
                         tuple(np.sort(ix).astype(np.int64) for ix in client_indices))


# -- triggers -------------------------------------------------------------

@dataclass(frozen=True)
class PoisonSpec:
    """Trigger geometry plus poisoning parameters.

    ``offsets`` are (row, col) cells inside a ``block`` whose origin is
    placed by ``anchor`` ("bottom-right" or an explicit (row, col) origin).
    The default is the full 5x5 block in the bottom-right corner, value 1.0,
    target label 5.
    """

    offsets: frozenset = FULL_TRIGGER
    block: tuple[int, int] = (5, 5)
    anchor: object = "bottom-right"
    value: float = 1.0
    target_label: int = 5
    pdr: float = 0.5
    dba_shard: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "offsets", frozenset(tuple(map(int, o)) for o in self.offsets))
        if not 0.0 < self.pdr <= 1.0:
            raise ValueError("PDR must be in (0, 1]")
        for r, c in self.offsets:
            if not (0 <= r < self.block[0] and 0 <= c < self.block[1]):
                raise ValueError(f"trigger offset ({r}, {c}) outside block {self.block}")

    def resolve(self, image_shape: tuple[int, ...]) -> tuple[np.ndarray, np.ndarray]:
        """Absolute (rows, cols) of the trigger cells for a given image shape."""
        h, w = image_shape[0], image_shape[1]
        bh, bw = self.block
        if self.anchor == "bottom-right":
            origin = (h - bh, w - bw)
        else:
            origin = (int(self.anchor[0]), int(self.anchor[1]))
        cells = sorted(self.offsets)
        rows = np.array([origin[0] + r for r, _ in cells])
        cols = np.array([origin[1] + c for _, c in cells])
        if rows.min() < 0 or rows.max() >= h or cols.min() < 0 or cols.max() >= w:
            raise ValueError(f"trigger exceeds image bounds {image_shape}")
        return rows, cols


def embed_trigger(image: np.ndarray, spec: PoisonSpec) -> np.ndarray:
    """Copy of ``image`` with the trigger cells set to the trigger value."""
    rows, cols = spec.resolve(image.shape)
    out = np.array(image, copy=True)
    out[rows, cols, ...] = spec.value
    return out


def embed_trigger_batch(images: np.ndarray, spec: PoisonSpec) -> np.ndarray:
    rows, cols = spec.resolve(images.shape[1:])
    out = np.array(images, copy=True)
    out[:, rows, cols, ...] = spec.value
    return out


_DBA_SHARDS = {
    1: frozenset((r, c) for r in range(0, 2) for c in range(0, 2)),  # 2x2
    2: frozenset((r, c) for r in range(0, 2) for c in range(2, 5)),  # 2x3
    3: frozenset((r, c) for r in range(2, 5) for c in range(0, 2)),  # 3x2
    4: frozenset((r, c) for r in range(2, 5) for c in range(2, 5)),  # 3x3
}


def dba_subtrigger(spec: PoisonSpec, shard: int) -> PoisonSpec:
    """Quadrant sub-trigger of the full 5x5 pattern (sizes 2x2/2x3/3x2/3x3)."""
    if shard not in _DBA_SHARDS:
        raise ValueError("DBA shard must be in 1..4")
    if spec.offsets != FULL_TRIGGER or spec.block != (5, 5):
        raise ValueError("DBA shards are defined on the full 5x5 trigger")
    return replace(spec, offsets=_DBA_SHARDS[shard], dba_shard=shard)


# -- poison splits --------------------------------------------------------

def build_poison_splits(client_data: LabeledSet, spec: PoisonSpec,
                        val_fraction: float = 0.2, seed: int = 0):
    """Split local data and build the four LSA datasets.

    Returns (clean_train, poison_train, clean_val, poison_val).  The
    poisoned training set mixes round(PDR * n_train) trigger-embedded,
    relabeled samples with the untouched remainder; the poisoned
    validation set triggers and relabels every validation sample.
    """
    if len(client_data) == 0:
        raise ValueError("client dataset is empty")
    if not 0.0 < val_fraction < 1.0:
        raise ValueError("val_fraction must be in (0, 1)")
    rng = np.random.default_rng(seed)
    n = len(client_data)
    order = rng.permutation(n)
    n_val = min(max(1, round(val_fraction * n)), n - 1)
    val_idx, train_idx = order[:n_val], order[n_val:]
    clean_train = client_data.take(train_idx)
    clean_val = client_data.take(val_idx)

    n_poison = round(spec.pdr * len(clean_train))
    chosen = rng.choice(len(clean_train), size=n_poison, replace=False)
    images = clean_train.images.copy()
    labels = clean_train.labels.copy()
    if n_poison:
        images[chosen] = embed_trigger_batch(images[chosen], spec)
        labels[chosen] = spec.target_label
    poison_train = LabeledSet(images, labels, clean_train.num_classes)

    poison_val = LabeledSet(
        embed_trigger_batch(clean_val.images, spec),
        np.full(len(clean_val), spec.target_label, dtype=np.int64),
        clean_val.num_classes)
    return clean_train, poison_train, clean_val, poison_val


def poison_testset(test: LabeledSet, spec: PoisonSpec,
                   exclude_target: bool = True) -> LabeledSet:
    """Server-side BSR oracle set: trigger + relabel the test split.

    Samples whose true label already equals the target are dropped by
    default (the usual backdoor-success convention, and what keeps a
    clean model's BSR near zero instead of near the class prior).
    """
    if exclude_target:
        keep = np.flatnonzero(test.labels != spec.target_label)
        test = test.take(keep)
    return LabeledSet(
        embed_trigger_batch(test.images, spec),
        np.full(len(test), spec.target_label, dtype=np.int64),
        test.num_classes)


def stratified_subset(data: LabeledSet, n: int, seed: int) -> LabeledSet:
    """Class-stratified random subset of size ``n``."""
    if not 0 < n <= len(data):
        raise ValueError(f"subset size {n} out of range for {len(data)} samples")
    rng = np.random.default_rng(seed)
    per_class = n // data.num_classes
    extra = n - per_class * data.num_classes
    chosen = []
    for c in range(data.num_classes):
        members = np.flatnonzero(data.labels == c)
        want = per_class + (1 if c < extra else 0)
        if want > len(members):
            raise ValueError(f"class {c} has only {len(members)} samples, need {want}")
        chosen.append(rng.choice(members, size=want, replace=False))
    idx = np.sort(np.concatenate(chosen))
    return data.take(idx)
