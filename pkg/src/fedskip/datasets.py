"""Dataset loading (MNIST IDX, UCI-HAR text), a synthetic fallback and
Dirichlet label-skew partitioning across clients."""

from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConsistencyError, DataFormatError, EmptyDatasetError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
UCIHAR_FEATURES = 561
UCIHAR_CLASSES = 6

MNIST_FILES = {
    "train_images": "train-images-idx3-ubyte",
    "train_labels": "train-labels-idx1-ubyte",
    "test_images": "t10k-images-idx3-ubyte",
    "test_labels": "t10k-labels-idx1-ubyte",
}


class DataParseError(DataFormatError):
    """A text dataset contained a token that is not a number."""


@dataclass
class LabeledDataset:
    inputs: np.ndarray
    labels: np.ndarray
    num_classes: int
    feature_shape: tuple[int, ...] = ()

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        n = self.labels.shape[0]
        if n < 1:
            raise EmptyDatasetError("dataset must hold at least one sample")
        if self.inputs.shape[0] != n:
            raise ConsistencyError(f"{self.inputs.shape[0]} inputs but {n} labels")
        if not self.feature_shape:
            self.feature_shape = tuple(self.inputs.shape[1:])
        self.feature_shape = tuple(int(d) for d in self.feature_shape)
        if int(np.prod(self.feature_shape)) != int(np.prod(self.inputs.shape[1:])):
            raise ConsistencyError(
                f"feature_shape {self.feature_shape} does not match inputs {self.inputs.shape}")
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise ConsistencyError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self):
        return self.labels.shape[0]

    def subset(self, indices) -> "LabeledDataset":
        indices = np.asarray(indices, dtype=np.int64)
        return LabeledDataset(self.inputs[indices], self.labels[indices],
                              self.num_classes, self.feature_shape)

    def subsample(self, n: int, seed: int) -> "LabeledDataset":
        """Uniform random subset of ``n`` samples, kept in original order."""
        if n >= len(self):
            return self
        rng = np.random.default_rng([seed, 0x5AB])
        return self.subset(np.sort(rng.choice(len(self), size=n, replace=False)))


@dataclass
class ClientDataset:
    """One client's share of a parent dataset, held as sample indices."""

    client_id: int
    indices: np.ndarray
    dataset: LabeledDataset | None = field(default=None, repr=False)

    def __post_init__(self):
        self.indices = np.asarray(self.indices, dtype=np.int64).reshape(-1)

    @property
    def size(self) -> int:
        return self.indices.shape[0]

    def __len__(self):
        return self.size

    @property
    def inputs(self):
        return self.dataset.inputs[self.indices]

    @property
    def labels(self):
        return self.dataset.labels[self.indices]


@dataclass
class Partition:
    clients: list[ClientDataset]
    alpha: float
    seed: int

    @property
    def sizes(self) -> dict[int, int]:
        return {c.client_id: c.size for c in self.clients}

    def __len__(self):
        return len(self.clients)


# ---------------------------------------------------------------------------
# MNIST


def _read_bytes(path) -> bytes:
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as f:
        return f.read()


def read_idx_images(path) -> np.ndarray:
    """Images as a uint8 array of shape (count, rows, cols)."""
    raw = _read_bytes(path)
    if len(raw) < 16:
        raise DataFormatError(f"{path}: truncated IDX header")
    magic, count, rows, cols = struct.unpack(">IIII", raw[:16])
    if magic != IDX_IMAGES_MAGIC:
        raise DataFormatError(f"{path}: bad magic 0x{magic:08x} for an image file")
    expected = 16 + count * rows * cols
    if len(raw) != expected:
        raise DataFormatError(f"{path}: expected {expected} bytes, found {len(raw)}")
    return np.frombuffer(raw, dtype=np.uint8, offset=16).reshape(count, rows, cols)


def read_idx_labels(path) -> np.ndarray:
    raw = _read_bytes(path)
    if len(raw) < 8:
        raise DataFormatError(f"{path}: truncated IDX header")
    magic, count = struct.unpack(">II", raw[:8])
    if magic != IDX_LABELS_MAGIC:
        raise DataFormatError(f"{path}: bad magic 0x{magic:08x} for a label file")
    if len(raw) != 8 + count:
        raise DataFormatError(f"{path}: expected {8 + count} bytes, found {len(raw)}")
    return np.frombuffer(raw, dtype=np.uint8, offset=8)


def write_idx_images(path, images) -> None:
    images = np.asarray(images, dtype=np.uint8)
    count, rows, cols = images.shape
    with open(path, "wb") as f:
        f.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, count, rows, cols))
        f.write(images.tobytes())


def write_idx_labels(path, labels) -> None:
    labels = np.asarray(labels, dtype=np.uint8).reshape(-1)
    with open(path, "wb") as f:
        f.write(struct.pack(">II", IDX_LABELS_MAGIC, labels.shape[0]))
        f.write(labels.tobytes())


def _mnist_split(images_path, labels_path) -> LabeledDataset:
    images = read_idx_images(images_path)
    labels = read_idx_labels(labels_path)
    if images.shape[0] != labels.shape[0]:
        raise ConsistencyError(
            f"{images_path} holds {images.shape[0]} images but "
            f"{labels_path} holds {labels.shape[0]} labels")
    inputs = (images.astype(np.float64) / 255.0)[:, None, :, :]
    return LabeledDataset(inputs, labels.astype(np.int64), 10, inputs.shape[1:])


def load_mnist(train_images_path, train_labels_path, test_images_path, test_labels_path):
    """Load MNIST from the four IDX files (optionally gzipped).

    Pixels are scaled to [0, 1]; inputs have shape (n, 1, rows, cols).
    """
    train = _mnist_split(train_images_path, train_labels_path)
    test = _mnist_split(test_images_path, test_labels_path)
    return train, test


def find_mnist_files(root) -> dict[str, Path]:
    """Locate the four canonical MNIST files under ``root``."""
    root = Path(root)
    found = {}
    for key, stem in MNIST_FILES.items():
        candidates = [stem, stem.replace("-idx", ".idx")]
        for name in candidates:
            for suffix in ("", ".gz"):
                p = root / (name + suffix)
                if p.is_file():
                    found.setdefault(key, p)
        if key not in found:
            raise FileNotFoundError(f"no {stem}[.gz] under {root}")
    return found


def load_mnist_dir(root):
    files = find_mnist_files(root)
    return load_mnist(files["train_images"], files["train_labels"],
                      files["test_images"], files["test_labels"])


# ---------------------------------------------------------------------------
# UCI-HAR


def _read_matrix(path, width) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"missing UCI-HAR file: {path}")
    rows = []
    with open(path, "r", encoding="ascii", errors="strict") as f:
        for lineno, line in enumerate(f, 1):
            tokens = line.split()
            if not tokens:
                continue
            if len(tokens) != width:
                raise DataFormatError(f"{path}:{lineno}: expected {width} values, found {len(tokens)}")
            try:
                rows.append([float(t) for t in tokens])
            except ValueError as exc:
                raise DataParseError(f"{path}:{lineno}: {exc}") from None
    if not rows:
        raise DataFormatError(f"{path}: no data rows")
    return np.asarray(rows, dtype=np.float64)


def _read_har_labels(path) -> np.ndarray:
    raw = _read_matrix(path, 1)[:, 0]
    if np.any(raw != np.round(raw)) or raw.min() < 1 or raw.max() > UCIHAR_CLASSES:
        raise DataFormatError(f"{path}: labels must be integers 1-{UCIHAR_CLASSES}")
    return raw.astype(np.int64) - 1


def load_ucihar(dataset_root_path):
    """Load the published UCI-HAR train/test split.

    Labels are remapped from 1-6 to 0-5. Features are standardized with the
    training-set mean and standard deviation (zero-variance features keep
    unit scale).
    """
    root = Path(dataset_root_path)
    x_train = _read_matrix(root / "train" / "X_train.txt", UCIHAR_FEATURES)
    y_train = _read_har_labels(root / "train" / "y_train.txt")
    x_test = _read_matrix(root / "test" / "X_test.txt", UCIHAR_FEATURES)
    y_test = _read_har_labels(root / "test" / "y_test.txt")
    if x_train.shape[0] != y_train.shape[0] or x_test.shape[0] != y_test.shape[0]:
        raise ConsistencyError("UCI-HAR feature and label row counts differ")
    mean = x_train.mean(axis=0)
    std = x_train.std(axis=0)
    std[std == 0] = 1.0
    train = LabeledDataset((x_train - mean) / std, y_train, UCIHAR_CLASSES)
    test = LabeledDataset((x_test - mean) / std, y_test, UCIHAR_CLASSES)
    return train, test


# ---------------------------------------------------------------------------
# synthetic fixture

_SYNTH_NOISE = 0.5
_SYNTH_NOISE_CAP = 1.5
_SYNTH_SEPARATION = 4.0


def _class_means(num_classes, dim):
    if num_classes <= dim:
        return _SYNTH_SEPARATION * np.eye(num_classes, dim)
    if dim == 1:
        return _SYNTH_SEPARATION * (np.arange(num_classes, dtype=np.float64)[:, None]
                                    - (num_classes - 1) / 2)
    # evenly spaced on a circle in the first two coordinates
    radius = _SYNTH_SEPARATION / (2 * np.sin(np.pi / num_classes))
    angles = 2 * np.pi * np.arange(num_classes) / num_classes
    means = np.zeros((num_classes, dim))
    means[:, 0] = radius * np.cos(angles)
    means[:, 1] = radius * np.sin(angles)
    return means


def make_synthetic(n: int, num_classes: int, dim: int, seed: int) -> LabeledDataset:
    """Gaussian blobs, one per class, with noise norms capped so the classes
    stay linearly separable with a margin of at least 0.5."""
    if min(n, num_classes, dim) < 1:
        raise ValueError("n, num_classes and dim must all be >= 1")
    rng = np.random.default_rng(seed)
    labels = rng.permutation(np.arange(n) % num_classes)
    noise = rng.normal(scale=_SYNTH_NOISE, size=(n, dim))
    norms = np.linalg.norm(noise, axis=1, keepdims=True)
    noise *= np.minimum(1.0, _SYNTH_NOISE_CAP / np.maximum(norms, 1e-300))
    inputs = _class_means(num_classes, dim)[labels] + noise
    return LabeledDataset(inputs, labels, num_classes, (dim,))


# ---------------------------------------------------------------------------
# partitioning

_MAX_RESAMPLES = 100


def largest_remainder(proportions, total: int) -> np.ndarray:
    """Integer counts summing to ``total`` that best match ``proportions``.

    Ties in the fractional parts go to the lower index.
    """
    raw = np.asarray(proportions, dtype=np.float64) * total
    counts = np.floor(raw).astype(np.int64)
    short = total - int(counts.sum())
    if short > 0:
        order = np.argsort(-(raw - counts), kind="stable")
        counts[order[:short]] += 1
    return counts


def dirichlet_partition(train: LabeledDataset, n_clients: int, alpha: float,
                        seed: int) -> Partition:
    """Label-skewed split: each class is spread across clients with
    proportions drawn from Dirichlet(alpha, ..., alpha)."""
    if n_clients < 1:
        raise ValueError("n_clients must be >= 1")
    if not alpha > 0:
        raise ValueError("alpha must be positive")
    n_clients = int(n_clients)
    if len(train) < n_clients:
        raise ValueError(f"cannot give {n_clients} clients a sample each from {len(train)}")
    rng = np.random.default_rng(seed)
    labels = train.labels
    classes = np.unique(labels)
    by_class = [rng.permutation(np.flatnonzero(labels == c)) for c in classes]
    concentration = np.full(n_clients, float(alpha))

    def draw(members):
        return largest_remainder(rng.dirichlet(concentration), members.shape[0])

    counts = np.stack([draw(m) for m in by_class])  # classes x clients
    attempt = 0
    while attempt < _MAX_RESAMPLES and np.any(counts.sum(axis=0) == 0):
        k = attempt % len(by_class)
        counts[k] = draw(by_class[k])
        attempt += 1

    per_client = [[] for _ in range(n_clients)]
    for members, row in zip(by_class, counts):
        bounds = np.concatenate([[0], np.cumsum(row)])
        for i in range(n_clients):
            per_client[i].append(members[bounds[i]:bounds[i + 1]])
    owned = [np.sort(np.concatenate(parts)) if parts else np.zeros(0, np.int64)
             for parts in per_client]

    for i in range(n_clients):
        if owned[i].size == 0:
            donor = max(range(n_clients), key=lambda j: (owned[j].size, -j))
            owned[i] = owned[donor][-1:]
            owned[donor] = owned[donor][:-1]

    clients = [ClientDataset(i, idx, train) for i, idx in enumerate(owned)]
    return Partition(clients, float(alpha), seed)


def default_data_root() -> Path | None:
    root = os.environ.get("FEDSKIP_DATA_DIR")
    return Path(root) if root else None
