"""Dataset loading, synthetic data and the major/minor non-IID partitioner."""

from __future__ import annotations

import gzip
import math
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from .errors import ConfigError, LoadError, PartitionError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CIFAR_RECORD = 1 + 3 * 32 * 32

DATA_ROOT_ENV = "FEDBPS_DATA_ROOT"

# (train images, train labels, test images, test labels), with or without .gz
IDX_FILES = (
    "train-images-idx3-ubyte",
    "train-labels-idx1-ubyte",
    "t10k-images-idx3-ubyte",
    "t10k-labels-idx1-ubyte",
)
DATASET_DIRS = {
    "mnist": ("mnist", "MNIST"),
    "fmnist": ("fmnist", "fashion-mnist", "FashionMNIST", "fashion_mnist"),
    "cifar10": ("cifar10", "cifar-10-batches-bin"),
}


@dataclass
class Dataset:
    inputs: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.inputs) != len(self.labels):
            raise LoadError(f"{len(self.inputs)} inputs but {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise LoadError(f"labels outside [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, indices) -> Dataset:
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.inputs[idx], self.labels[idx], self.num_classes)


# ---------------------------------------------------------------------------
# File loaders
# ---------------------------------------------------------------------------

def _read_bytes(path: Union[str, Path]) -> bytes:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise LoadError(f"cannot read {path}: {exc}") from exc
    if raw[:2] == b"\x1f\x8b":
        try:
            raw = gzip.decompress(raw)
        except (OSError, EOFError) as exc:
            raise LoadError(f"{path}: corrupt gzip stream: {exc}") from exc
    return raw


def _parse_idx(raw: bytes, magic: int, path) -> np.ndarray:
    if len(raw) < 8:
        raise LoadError(f"{path}: truncated header")
    got = struct.unpack(">I", raw[:4])[0]
    if got != magic:
        raise LoadError(f"{path}: bad magic 0x{got:08x}, expected 0x{magic:08x}")
    ndim = raw[3]
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise LoadError(f"{path}: truncated header")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    expected = header + math.prod(dims)
    if len(raw) < expected:
        raise LoadError(f"{path}: truncated data ({len(raw)} of {expected} bytes)")
    if len(raw) > expected:
        raise LoadError(f"{path}: {len(raw) - expected} trailing bytes")
    return np.frombuffer(raw, dtype=np.uint8, offset=header).reshape(dims)


def load_idx(images_path, labels_path, num_classes: int = 10) -> Dataset:
    """Load an IDX image/label pair (MNIST layout); pixels scaled to [0, 1]."""
    images = _parse_idx(_read_bytes(images_path), IDX_IMAGES_MAGIC, images_path)
    labels = _parse_idx(_read_bytes(labels_path), IDX_LABELS_MAGIC, labels_path)
    if images.ndim != 3:
        raise LoadError(f"{images_path}: expected 3 dims, got {images.ndim}")
    if labels.ndim != 1:
        raise LoadError(f"{labels_path}: expected 1 dim, got {labels.ndim}")
    if len(images) != len(labels):
        raise LoadError(f"count mismatch: {len(images)} images vs {len(labels)} labels")
    if len(labels) == 0:
        raise LoadError(f"{images_path}: no samples")
    if labels.max() >= num_classes:
        raise LoadError(f"{labels_path}: label {labels.max()} >= num_classes={num_classes}")
    x = images[:, None, :, :].astype(np.float64) / 255.0
    return Dataset(x, labels.astype(np.int64), num_classes)


def load_cifar10(bin_paths: Sequence) -> Dataset:
    """Load CIFAR-10 binary batches (3073-byte records) into ``[N, 3, 32, 32]``."""
    if isinstance(bin_paths, (str, Path)):
        bin_paths = [bin_paths]
    if not bin_paths:
        raise LoadError("no CIFAR-10 batch files given")
    xs, ys = [], []
    for path in bin_paths:
        raw = _read_bytes(path)
        if len(raw) == 0 or len(raw) % CIFAR_RECORD:
            raise LoadError(f"{path}: size {len(raw)} is not a positive multiple of {CIFAR_RECORD}")
        rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
        if rec[:, 0].max() >= 10:
            raise LoadError(f"{path}: label {rec[:, 0].max()} out of range")
        ys.append(rec[:, 0].astype(np.int64))
        xs.append(rec[:, 1:].reshape(-1, 3, 32, 32).astype(np.float64) / 255.0)
    return Dataset(np.concatenate(xs), np.concatenate(ys), 10)


def _find_dir(root: Path, name: str) -> Path:
    for sub in DATASET_DIRS[name]:
        cand = root / sub
        if cand.is_dir():
            return cand
        nested = root / name / sub
        if nested.is_dir():
            return nested
    return root


def _find_file(folder: Path, stem: str) -> Path:
    for cand in (folder / stem, folder / f"{stem}.gz"):
        if cand.exists():
            return cand
    raise LoadError(f"{stem}[.gz] not found under {folder}")


def resolve_data_root(data_root: Optional[str]) -> Path:
    root = data_root or os.environ.get(DATA_ROOT_ENV)
    if not root:
        raise LoadError(f"no dataset root: set data_root in the config or ${DATA_ROOT_ENV}")
    path = Path(root).expanduser()
    if not path.is_dir():
        raise LoadError(f"dataset root {path} is not a directory")
    return path


def load_named(name: str, data_root: Optional[str] = None) -> tuple[Dataset, Dataset]:
    """Train and test split of ``mnist``, ``fmnist`` or ``cifar10`` from the dataset root."""
    if name not in DATASET_DIRS:
        raise ConfigError(f"unknown dataset {name!r}; expected one of {sorted(DATASET_DIRS)}")
    folder = _find_dir(resolve_data_root(data_root), name)
    if name == "cifar10":
        train = load_cifar10([_find_file(folder, f"data_batch_{i}.bin") for i in range(1, 6)])
        test = load_cifar10([_find_file(folder, "test_batch.bin")])
        return train, test
    files = [_find_file(folder, stem) for stem in IDX_FILES]
    return load_idx(files[0], files[1]), load_idx(files[2], files[3])


# ---------------------------------------------------------------------------
# Synthetic data
# ---------------------------------------------------------------------------

def synthesize(classes: int, per_class: int, dims: Union[int, Sequence[int]],
               class_separation: float, seed: int, noise: float = 1.0) -> Dataset:
    """One isotropic Gaussian blob per class, shuffled.

    Class means are ``class_separation`` times a standard normal draw scaled
    by ``1/sqrt(d)``, so the expected distance between two means is about
    ``class_separation * sqrt(2)`` regardless of dimension.
    """
    if classes < 2:
        raise ConfigError("synthetic data needs at least 2 classes")
    if per_class < 1:
        raise ConfigError("per_class must be >= 1")
    shape = (dims,) if isinstance(dims, int) else tuple(dims)
    d = math.prod(shape)
    rng = np.random.default_rng(seed)
    means = class_separation * rng.standard_normal((classes, d)) / math.sqrt(d)
    labels = np.repeat(np.arange(classes), per_class)
    x = means[labels] + noise * rng.standard_normal((len(labels), d))
    order = rng.permutation(len(labels))
    return Dataset(x[order].reshape((-1,) + shape), labels[order], classes)


# ---------------------------------------------------------------------------
# Major/minor partitioning
# ---------------------------------------------------------------------------

PARTITION_MODES = ("iid_share", "major_share")


@dataclass
class PartitionPlan:
    train_indices: list[np.ndarray]
    test_indices: list[np.ndarray]
    major_classes: list[list[int]]
    s: float
    n_major: int
    seed: int
    mode: str = "iid_share"
    class_counts_train: list[np.ndarray] = field(default_factory=list)
    class_counts_test: list[np.ndarray] = field(default_factory=list)

    @property
    def n_clients(self) -> int:
        return len(self.train_indices)


def _split_even(total: int, slots: int) -> np.ndarray:
    base, extra = divmod(total, slots)
    out = np.full(slots, base, dtype=np.int64)
    out[:extra] += 1
    return out


def client_class_counts(n_samples: int, majors: Sequence[int], class_order: Sequence[int],
                        num_classes: int, s: float, client: int, mode: str = "iid_share") -> np.ndarray:
    """Per-class sample counts for one client.

    ``iid_share`` mode: ``round((1-s) n)`` samples from the major classes and
    the rest spread evenly over all classes. ``major_share`` mode: ``round(s n)``
    from the major classes and the rest spread over the remaining classes.
    Leftover samples from uneven splits rotate with the client index.
    """
    if mode not in PARTITION_MODES:
        raise ConfigError(f"unknown partition mode {mode!r}")
    major_frac = (1.0 - s) if mode == "iid_share" else s
    n_maj = int(math.floor(major_frac * n_samples + 0.5))
    counts = np.zeros(num_classes, dtype=np.int64)
    for c, k in zip(majors, _split_even(n_maj, len(majors))):
        counts[c] += k
    pool = list(class_order) if mode == "iid_share" else [c for c in class_order if c not in set(majors)]
    rest = n_samples - n_maj
    if rest and not pool:
        raise PartitionError("no minor classes left to draw from")
    if pool:
        shift = client % len(pool)
        pool = pool[shift:] + pool[:shift]
        for c, k in zip(pool, _split_even(rest, len(pool))):
            counts[c] += k
    return counts


def partition_major_minor(dataset: Dataset, n_clients: int, n_major: int = 2, s: float = 0.2,
                          seed: int = 0, test_dataset: Optional[Dataset] = None,
                          train_per_client: Optional[int] = None,
                          test_per_client: Optional[int] = None,
                          mode: str = "iid_share") -> PartitionPlan:
    """Equal-size non-IID shards built from major and minor classes.

    Each client gets ``n_major`` major classes, assigned round-robin over a
    seed-permuted class order. The test split uses the same major classes
    and proportions. Without ``test_dataset`` the test shards are drawn from
    samples of ``dataset`` that no train shard uses.
    """
    c = dataset.num_classes
    if n_clients < 1:
        raise ConfigError("n_clients must be >= 1")
    if not 1 <= n_major <= c:
        raise ConfigError(f"n_major must lie in [1, {c}], got {n_major}")
    if not 0.0 <= s <= 1.0:
        raise ConfigError(f"s must lie in [0, 1], got {s}")
    if mode not in PARTITION_MODES:
        raise ConfigError(f"unknown partition mode {mode!r}; expected one of {PARTITION_MODES}")
    if test_dataset is not None and test_dataset.num_classes != c:
        raise ConfigError("train and test datasets disagree on class count")

    rng = np.random.default_rng(seed)
    class_order = [int(k) for k in rng.permutation(c)]
    majors = [[class_order[(i * n_major + j) % c] for j in range(n_major)] for i in range(n_clients)]

    if train_per_client is None:
        train_per_client = len(dataset) // n_clients
    if test_per_client is None:
        test_per_client = len(test_dataset) // n_clients if test_dataset is not None else 0
    if train_per_client < 1:
        raise ConfigError("train_per_client must be >= 1")
    if test_per_client < 0:
        raise ConfigError("test_per_client must be >= 0")

    def pools(labels):
        return [list(rng.permutation(np.flatnonzero(labels == k))) for k in range(c)]

    def deal(per_client, pool, what):
        counts = [client_class_counts(per_client, majors[i], class_order, c, s, i, mode)
                  for i in range(n_clients)]
        need = np.sum(counts, axis=0)
        have = np.array([len(p) for p in pool])
        short = {k: int(need[k] - have[k]) for k in range(c) if need[k] > have[k]}
        if short:
            detail = ", ".join(f"class {k}: short by {v}" for k, v in short.items())
            raise PartitionError(f"{what} split cannot satisfy the plan ({detail})")
        shards = []
        for i in range(n_clients):
            take = []
            for k in range(c):
                n = int(counts[i][k])
                take.extend(pool[k][:n])
                del pool[k][:n]
            shards.append(np.sort(np.asarray(take, dtype=np.int64)))
        return shards, counts

    train_pool = pools(dataset.labels)
    train_idx, train_counts = deal(train_per_client, train_pool, "train")
    test_pool = train_pool if test_dataset is None else pools(test_dataset.labels)
    if test_per_client:
        test_idx, test_counts = deal(test_per_client, test_pool, "test")
    else:
        test_idx = [np.zeros(0, dtype=np.int64) for _ in range(n_clients)]
        test_counts = [np.zeros(c, dtype=np.int64) for _ in range(n_clients)]
    return PartitionPlan(train_idx, test_idx, majors, s, n_major, seed, mode, train_counts, test_counts)


def label_histograms(labels: np.ndarray, shards: Sequence[np.ndarray], num_classes: int) -> np.ndarray:
    """``[n_clients, num_classes]`` label counts for each shard."""
    return np.stack([np.bincount(labels[idx], minlength=num_classes) for idx in shards])
