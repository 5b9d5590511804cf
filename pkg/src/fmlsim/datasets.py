"""Dataset ingestion, synthesis, and non-IID partitioning.

Two data sources feed the simulator: IDX image/label files (the classic
big-endian binary layout used by MNIST-style corpora) and synthetic
Gaussian blobs for fast, fully seeded desk-scale runs.  A quantity- and
label-skewed partitioner slices one dataset into pairwise-disjoint
per-device shards with local train/test splits.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    BadMagic,
    CountMismatch,
    Infeasible,
    InvalidParam,
    TruncatedFile,
)

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801


@dataclass
class Dataset:
    """A labelled feature matrix.

    features: (n, d) float64 array, values in [0, 1] for IDX sources.
    labels:   (n,) int64 array, each in [0, num_classes).
    """

    features: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.features) == 0:
            raise InvalidParam("dataset must be non-empty")
        if len(self.features) != len(self.labels):
            raise CountMismatch(
                f"{len(self.features)} feature rows vs {len(self.labels)} labels"
            )
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise InvalidParam("labels outside [0, num_classes)")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    def subset(self, indices) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.features[idx], self.labels[idx], self.num_classes)


@dataclass
class Shard:
    """One device's slice of a dataset: local train/test plus provenance.

    train_indices / test_indices are row indices into the source dataset,
    kept so disjointness across shards can be audited sample-by-sample.
    """

    owner: int
    train: Dataset
    test: Dataset
    classes_present: tuple
    train_indices: np.ndarray = field(default=None, repr=False)
    test_indices: np.ndarray = field(default=None, repr=False)


def _read_u32(buf: bytes, off: int, path: str) -> int:
    if off + 4 > len(buf):
        raise TruncatedFile(f"{path}: header ends at byte {len(buf)}")
    return struct.unpack_from(">I", buf, off)[0]


def load_idx(images_path: str, labels_path: str) -> Dataset:
    """Load an IDX image/label file pair into a Dataset.

    Layout (all integers big-endian): images start with magic 0x00000803,
    then count, rows, cols, then count*rows*cols unsigned bytes; labels
    start with magic 0x00000801, then count, then count unsigned bytes.
    Pixel bytes are scaled to floats by /255.  The file must contain
    exactly the declared payload.

    Raises BadMagic, TruncatedFile, or CountMismatch.
    """
    with open(images_path, "rb") as f:
        img_buf = f.read()
    with open(labels_path, "rb") as f:
        lab_buf = f.read()

    magic = _read_u32(img_buf, 0, images_path)
    if magic != IMAGE_MAGIC:
        raise BadMagic(f"{images_path}: magic {magic:#010x} != {IMAGE_MAGIC:#010x}")
    n = _read_u32(img_buf, 4, images_path)
    rows = _read_u32(img_buf, 8, images_path)
    cols = _read_u32(img_buf, 12, images_path)
    need = 16 + n * rows * cols
    if len(img_buf) < need:
        raise TruncatedFile(f"{images_path}: {len(img_buf)} bytes, need {need}")
    if len(img_buf) > need:
        raise TruncatedFile(f"{images_path}: {len(img_buf) - need} trailing bytes")

    magic = _read_u32(lab_buf, 0, labels_path)
    if magic != LABEL_MAGIC:
        raise BadMagic(f"{labels_path}: magic {magic:#010x} != {LABEL_MAGIC:#010x}")
    n_lab = _read_u32(lab_buf, 4, labels_path)
    need = 8 + n_lab
    if len(lab_buf) < need:
        raise TruncatedFile(f"{labels_path}: {len(lab_buf)} bytes, need {need}")
    if len(lab_buf) > need:
        raise TruncatedFile(f"{labels_path}: {len(lab_buf) - need} trailing bytes")
    if n != n_lab:
        raise CountMismatch(f"{n} images vs {n_lab} labels")

    pixels = np.frombuffer(img_buf, dtype=np.uint8, count=n * rows * cols, offset=16)
    features = pixels.reshape(n, rows * cols).astype(np.float64) / 255.0
    labels = np.frombuffer(lab_buf, dtype=np.uint8, count=n, offset=8).astype(np.int64)
    return Dataset(features, labels, int(labels.max()) + 1)


def write_idx(ds: Dataset, images_path: str, labels_path: str) -> None:
    """Write a Dataset as an IDX pair (inverse of load_idx, bit-exact).

    Features are quantized back to bytes via round(x*255); data that came
    from load_idx round-trips exactly.  The image payload is written as a
    (count, feature_dim, 1) tensor.
    """
    n, d = ds.features.shape
    pixels = np.clip(np.rint(ds.features * 255.0), 0, 255).astype(np.uint8)
    with open(images_path, "wb") as f:
        f.write(struct.pack(">IIII", IMAGE_MAGIC, n, d, 1))
        f.write(pixels.tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">II", LABEL_MAGIC, n))
        f.write(ds.labels.astype(np.uint8).tobytes())


def synth_blobs(
    num_classes: int,
    per_class: int,
    feature_dim: int,
    sigma: float,
    seed: int,
    center_scale: float = 2.0,
) -> Dataset:
    """Generate isotropic Gaussian blobs, one fixed center per class.

    Centers are drawn once from N(0, center_scale^2 I) under the given
    seed, then per_class samples per class are drawn around them with
    spread sigma.  The same arguments always yield the same dataset.
    """
    if num_classes < 2:
        raise InvalidParam("need at least 2 classes")
    if per_class < 1 or feature_dim < 1:
        raise InvalidParam("per_class and feature_dim must be positive")
    if sigma <= 0 or center_scale <= 0:
        raise InvalidParam("sigma and center_scale must be positive")
    rng = np.random.default_rng(seed)
    centers = rng.normal(0.0, center_scale, size=(num_classes, feature_dim))
    features = np.empty((num_classes * per_class, feature_dim))
    labels = np.empty(num_classes * per_class, dtype=np.int64)
    for c in range(num_classes):
        block = slice(c * per_class, (c + 1) * per_class)
        features[block] = centers[c] + rng.normal(0.0, sigma, size=(per_class, feature_dim))
        labels[block] = c
    return Dataset(features, labels, num_classes)


def _apportion(pool_size: int, weights: np.ndarray) -> np.ndarray:
    """Split pool_size items by weights, minimum 1 each, largest remainder.

    Total allocated is exactly pool_size when it divides cleanly under the
    minimum, otherwise floor allocations leave a discarded remainder.
    """
    k = len(weights)
    counts = np.ones(k, dtype=np.int64)
    remaining = pool_size - k
    if remaining > 0:
        quota = weights * remaining
        extra = np.floor(quota).astype(np.int64)
        counts += extra
        leftover = remaining - int(extra.sum())
        if leftover > 0:
            frac = quota - extra
            order = np.lexsort((np.arange(k), -frac))  # largest remainder, ties by index
            counts[order[:leftover]] += 1
    return counts


def partition_quantity_label(
    ds: Dataset,
    num_learners: int,
    classes_per_device: int,
    seed: int,
    dirichlet_alpha: float = 0.5,
    train_frac: float = 0.9,
) -> list:
    """Partition a dataset into disjoint non-IID shards.

    Each learner draws classes_per_device distinct classes uniformly.
    Within each class pool the demanding learners receive quantity-skewed
    slices: weights ~ Dirichlet(dirichlet_alpha), floored, minimum one
    sample each, leftover samples discarded.  Every shard is then split
    into train/test with floor(1 - train_frac) test fraction, at least
    one test sample.  Shards are pairwise disjoint by construction.

    Raises Infeasible when a class is demanded by more learners than it
    has samples, InvalidParam on bad arguments.
    """
    if num_learners < 1:
        raise InvalidParam("num_learners must be >= 1")
    if not 1 <= classes_per_device <= ds.num_classes:
        raise InvalidParam("classes_per_device outside [1, num_classes]")
    if dirichlet_alpha <= 0:
        raise InvalidParam("dirichlet_alpha must be positive")
    if not 0.0 < train_frac < 1.0:
        raise InvalidParam("train_frac must be in (0, 1)")

    rng = np.random.default_rng(seed)
    class_of = [
        np.sort(rng.choice(ds.num_classes, size=classes_per_device, replace=False))
        for _ in range(num_learners)
    ]
    pools = {c: np.flatnonzero(ds.labels == c) for c in range(ds.num_classes)}

    assigned = [[] for _ in range(num_learners)]
    for c in range(ds.num_classes):
        demanders = [i for i in range(num_learners) if c in class_of[i]]
        if not demanders:
            continue
        pool = pools[c]
        if len(pool) < len(demanders):
            raise Infeasible(
                f"class {c}: {len(demanders)} shards demand it, {len(pool)} samples"
            )
        weights = rng.dirichlet(np.full(len(demanders), dirichlet_alpha))
        counts = _apportion(len(pool), weights)
        pool = rng.permutation(pool)
        start = 0
        for who, cnt in zip(demanders, counts):
            assigned[who].append(pool[start : start + cnt])
            start += cnt
        # pool[start:] stays unassigned and is discarded

    shards = []
    for i in range(num_learners):
        idx = rng.permutation(np.concatenate(assigned[i]))
        if len(idx) < 2:
            raise Infeasible(f"shard {i} got {len(idx)} samples; cannot split train/test")
        n_test = max(1, int(np.floor(len(idx) * (1.0 - train_frac))))
        test_idx, train_idx = idx[:n_test], idx[n_test:]
        shards.append(
            Shard(
                owner=i,
                train=ds.subset(train_idx),
                test=ds.subset(test_idx),
                classes_present=tuple(int(c) for c in class_of[i]),
                train_indices=train_idx,
                test_indices=test_idx,
            )
        )
    return shards
