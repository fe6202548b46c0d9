"""Datasets: Gaussian blobs, MNIST IDX files, CSV export and batching."""

from __future__ import annotations

import csv
import gzip
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801
SPLITS = ("train", "validation", "test")


@dataclass(frozen=True)
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    n_classes: int
    split: str = "train"

    def __post_init__(self):
        x = np.ascontiguousarray(self.features, dtype=np.float64)
        y = np.asarray(self.labels, dtype=np.int64)
        if x.ndim != 2 or y.shape != (x.shape[0],):
            raise ValueError(f"features {x.shape} and labels {y.shape} do not match")
        if x.shape[0] < 1:
            raise ValueError("a dataset needs at least one sample")
        if np.isnan(x).any():
            raise ValueError("features contain NaN")
        if y.min() < 0 or y.max() >= self.n_classes:
            raise ValueError(f"labels must lie in 0..{self.n_classes - 1}")
        if self.split not in SPLITS:
            raise ValueError(f"unknown split {self.split!r}")
        object.__setattr__(self, "features", x)
        object.__setattr__(self, "labels", y)

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def subset(self, index, split: str | None = None) -> "Dataset":
        return Dataset(self.features[index], self.labels[index], self.n_classes, split or self.split)


@dataclass(frozen=True)
class BlobSpec:
    """Isotropic Gaussian clusters, one per class.

    Class centers are drawn from N(0, center_spread^2 I); points scatter around
    their center with ``within_std``.  ``split`` gives the train/validation/test
    fractions applied within every class.
    """

    n_classes: int = 4
    samples_per_class: int = 200
    center_spread: float = 2.0
    within_std: float = 1.0
    dim: int = 2
    seed: int = 0
    split: tuple[float, float, float] = (0.70, 0.15, 0.15)

    def __post_init__(self):
        if self.n_classes < 2 or self.samples_per_class < 3 or self.dim < 1:
            raise ValueError("blob spec needs >= 2 classes, >= 3 samples per class, dim >= 1")
        if self.center_spread <= 0 or self.within_std < 0:
            raise ValueError("center_spread must be positive and within_std nonnegative")
        if len(self.split) != 3 or min(self.split) <= 0 or abs(sum(self.split) - 1) > 1e-9:
            raise ValueError(f"split fractions must be three positives summing to 1, got {self.split}")


def split_counts(spec: BlobSpec) -> tuple[int, int, int]:
    n = spec.samples_per_class
    n_train = int(round(spec.split[0] * n))
    n_val = int(round(spec.split[1] * n))
    n_test = n - n_train - n_val
    if min(n_train, n_val, n_test) < 1:
        raise ValueError(f"{n} samples per class leave an empty split under {spec.split}")
    return n_train, n_val, n_test


def generate_blobs(spec: BlobSpec) -> tuple[Dataset, Dataset, Dataset]:
    """Class-balanced train/validation/test splits, deterministic in ``spec.seed``."""
    rng = np.random.default_rng(spec.seed)
    centers = rng.normal(0.0, spec.center_spread, size=(spec.n_classes, spec.dim))
    counts = split_counts(spec)
    parts: list[list[np.ndarray]] = [[], [], []]
    labels: list[list[np.ndarray]] = [[], [], []]
    for k in range(spec.n_classes):
        pts = centers[k] + spec.within_std * rng.standard_normal((spec.samples_per_class, spec.dim))
        start = 0
        for s, n in enumerate(counts):
            parts[s].append(pts[start:start + n])
            labels[s].append(np.full(n, k))
            start += n
    out = []
    for s, name in enumerate(SPLITS):
        x, y = np.concatenate(parts[s]), np.concatenate(labels[s])
        order = rng.permutation(len(y))
        out.append(Dataset(x[order], y[order], spec.n_classes, name))
    return tuple(out)


def batches(n_samples: int, batch_size: int, seed: int, epoch: int) -> list[np.ndarray]:
    """Seeded permutation of ``range(n_samples)`` cut into consecutive batches."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    order = np.random.default_rng([seed, epoch]).permutation(n_samples)
    return [order[i:i + batch_size] for i in range(0, n_samples, batch_size)]


# -- IDX ---------------------------------------------------------------------


class IdxError(ValueError):
    """Malformed IDX file."""


class BadMagicError(IdxError):
    pass


class TruncatedError(IdxError):
    pass


class CountMismatchError(IdxError):
    pass


def _read_bytes(path) -> bytes:
    path = Path(path)
    raw = path.read_bytes()
    if path.suffix == ".gz":
        try:
            raw = gzip.decompress(raw)
        except (OSError, EOFError) as exc:
            raise TruncatedError(f"{path}: corrupt gzip stream ({exc})") from exc
    return raw


def _header(raw: bytes, n_words: int, magic: int, path) -> tuple[int, ...]:
    need = 4 * n_words
    # Magic first, so a wrong-kind file is reported as such even when short.
    if len(raw) >= 4:
        (found,) = struct.unpack(">I", raw[:4])
        if found != magic:
            raise BadMagicError(f"{path}: magic 0x{found:08x}, expected 0x{magic:08x}")
    if len(raw) < need:
        raise TruncatedError(f"{path}: header needs {need} bytes, file has {len(raw)}")
    return struct.unpack(f">{n_words}I", raw[:need])


def read_idx_images(path) -> np.ndarray:
    """Raw ``count x rows x cols`` uint8 pixels."""
    raw = _read_bytes(path)
    _, count, rows, cols = _header(raw, 4, IMAGES_MAGIC, path)
    size = count * rows * cols
    if len(raw) - 16 < size:
        raise TruncatedError(f"{path}: payload has {len(raw) - 16} bytes, header promises {size}")
    return np.frombuffer(raw, dtype=np.uint8, count=size, offset=16).reshape(count, rows, cols)


def read_idx_labels(path) -> np.ndarray:
    raw = _read_bytes(path)
    _, count = _header(raw, 2, LABELS_MAGIC, path)
    if len(raw) - 8 < count:
        raise TruncatedError(f"{path}: payload has {len(raw) - 8} bytes, header promises {count}")
    return np.frombuffer(raw, dtype=np.uint8, count=count, offset=8).copy()


def write_idx_images(path, images: np.ndarray) -> None:
    images = np.asarray(images, dtype=np.uint8)
    count, rows, cols = images.shape
    Path(path).write_bytes(struct.pack(">4I", IMAGES_MAGIC, count, rows, cols) + images.tobytes())


def write_idx_labels(path, labels: np.ndarray) -> None:
    labels = np.asarray(labels, dtype=np.uint8)
    Path(path).write_bytes(struct.pack(">2I", LABELS_MAGIC, labels.size) + labels.tobytes())


def load_mnist_idx(images_path, labels_path, split: str = "train") -> Dataset:
    """MNIST-style pair of IDX files as flattened [0, 1] features, 10 classes."""
    images = read_idx_images(images_path)
    labels = read_idx_labels(labels_path)
    if images.shape[0] != labels.shape[0]:
        raise CountMismatchError(
            f"{images_path} holds {images.shape[0]} images but {labels_path} holds {labels.shape[0]} labels"
        )
    if labels.size and labels.max() > 9:
        raise IdxError(f"{labels_path}: label {labels.max()} outside 0..9")
    features = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    return Dataset(features, labels.astype(np.int64), 10, split)


# -- CSV ---------------------------------------------------------------------


def save_dataset_csv(data: Dataset, path) -> None:
    header = [f"x{j}" for j in range(data.dim)] + ["label"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row, label in zip(data.features, data.labels):
            w.writerow([repr(float(v)) for v in row] + [int(label)])


def load_dataset_csv(path, n_classes: int | None = None, split: str = "train") -> Dataset:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    if header[-1] != "label":
        raise ValueError(f"{path}: last column must be 'label'")
    x = np.array([[float(v) for v in r[:-1]] for r in body], dtype=np.float64).reshape(len(body), -1)
    y = np.array([int(r[-1]) for r in body], dtype=np.int64)
    return Dataset(x, y, n_classes if n_classes is not None else int(y.max()) + 1, split)
