"""Dataset loading and generation.

IDX readers/writers (MNIST, Fashion-MNIST), the CIFAR-10 binary batch reader,
Gaussian blobs, and preprocessing helpers. Loaded pixels are scaled to [0, 1];
no standardization is applied.
"""
from __future__ import annotations

import gzip as _gzip
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .serialization import FormatError

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801

DATA_DIR_ENV = "DISTILLED_REPLAY_DATA"

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


@dataclass
class Dataset:
    images: np.ndarray
    labels: np.ndarray
    num_classes: int
    name: str = ""
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.images) != len(self.labels):
            raise FormatError(f"{len(self.images)} images but {len(self.labels)} labels")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise FormatError(f"labels outside [0, {self.num_classes})")

    def __len__(self):
        return len(self.labels)

    def subset(self, idx, name: str | None = None) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.images[idx], self.labels[idx], self.num_classes, name or self.name, dict(self.meta))

    def classes(self) -> set[int]:
        return set(int(c) for c in np.unique(self.labels))


def concat(datasets, name: str = "") -> Dataset:
    datasets = list(datasets)
    return Dataset(
        np.concatenate([d.images for d in datasets]),
        np.concatenate([d.labels for d in datasets]),
        max(d.num_classes for d in datasets),
        name or "+".join(d.name for d in datasets),
    )


def _open(path, use_gzip):
    path = Path(path)
    if use_gzip is None:
        use_gzip = path.suffix == ".gz"
    return _gzip.open(path, "rb") if use_gzip else open(path, "rb")


def _read_exact(f, n, what):
    buf = f.read(n)
    if len(buf) != n:
        raise OSError(f"truncated IDX file while reading {what}: wanted {n} bytes, got {len(buf)}")
    return buf


def read_idx_images(path, gzip: bool | None = None) -> np.ndarray:
    with _open(path, gzip) as f:
        magic, n, rows, cols = struct.unpack(">IIII", _read_exact(f, 16, "image header"))
        if magic != IMAGES_MAGIC:
            raise FormatError(f"{path}: bad image magic 0x{magic:08x}, expected 0x{IMAGES_MAGIC:08x}")
        raw = _read_exact(f, n * rows * cols, "pixels")
    return np.frombuffer(raw, dtype=np.uint8).reshape(n, rows, cols)


def read_idx_labels(path, gzip: bool | None = None) -> np.ndarray:
    with _open(path, gzip) as f:
        magic, n = struct.unpack(">II", _read_exact(f, 8, "label header"))
        if magic != LABELS_MAGIC:
            raise FormatError(f"{path}: bad label magic 0x{magic:08x}, expected 0x{LABELS_MAGIC:08x}")
        raw = _read_exact(f, n, "labels")
    return np.frombuffer(raw, dtype=np.uint8).astype(np.int64)


def load_idx(images_path, labels_path, gzip: bool | None = None, num_classes: int = 10, name: str = "") -> Dataset:
    """Read an IDX image/label pair. ``gzip=None`` decides by the ``.gz`` suffix."""
    pixels = read_idx_images(images_path, gzip)
    labels = read_idx_labels(labels_path, gzip)
    if len(pixels) != len(labels):
        raise FormatError(f"image count {len(pixels)} != label count {len(labels)}")
    return Dataset(pixels.astype(np.float64) / 255.0, labels, num_classes, name or Path(images_path).name)


def write_idx(dataset: Dataset, images_path, labels_path, gzip: bool | None = None) -> None:
    """Write pixels (rounded from [0, 1] to u8) and labels as IDX files."""
    imgs = dataset.images
    if imgs.ndim != 3:
        raise FormatError(f"IDX image files need [n, rows, cols] images, got {imgs.shape}")
    u8 = np.clip(np.floor(imgs * 255.0 + 0.5), 0, 255).astype(np.uint8)
    n, rows, cols = u8.shape
    for path, header, body in (
        (images_path, struct.pack(">IIII", IMAGES_MAGIC, n, rows, cols), u8.tobytes()),
        (labels_path, struct.pack(">II", LABELS_MAGIC, n), dataset.labels.astype(np.uint8).tobytes()),
    ):
        use_gzip = Path(path).suffix == ".gz" if gzip is None else gzip
        # mtime=0 keeps gzip output byte-stable
        opener = (lambda p: _gzip.GzipFile(p, "wb", mtime=0)) if use_gzip else (lambda p: open(p, "wb"))
        with opener(path) as f:
            f.write(header + body)


def find_idx_pair(data_dir, split: str, prefix: str = "") -> tuple[Path, Path]:
    data_dir = Path(data_dir)
    names = MNIST_FILES[split]
    for suffix in ("", ".gz"):
        img, lab = (data_dir / f"{prefix}{n}{suffix}" for n in names)
        if img.exists() and lab.exists():
            return img, lab
    raise FileNotFoundError(f"no {split} IDX files ({names[0]}[.gz]) in {data_dir}")


def load_mnist(data_dir=None, name: str = "mnist") -> tuple[Dataset, Dataset]:
    """(train, test) from the standard MNIST/Fashion-MNIST file names in ``data_dir``."""
    data_dir = resolve_data_dir(data_dir)
    train = load_idx(*find_idx_pair(data_dir, "train"), name=f"{name}-train")
    test = load_idx(*find_idx_pair(data_dir, "test"), name=f"{name}-test")
    return train, test


def resolve_data_dir(data_dir=None) -> Path:
    env = os.environ.get(DATA_DIR_ENV)
    if env:
        return Path(env)
    if data_dir is None:
        raise FileNotFoundError(f"no data directory given and ${DATA_DIR_ENV} is unset")
    return Path(data_dir)


def load_cifar10_batch(path) -> Dataset:
    """One CIFAR-10 binary batch: records of 1 label byte + 3072 CHW pixel bytes."""
    raw = np.frombuffer(Path(path).read_bytes(), dtype=np.uint8)
    if raw.size % 3073:
        raise FormatError(f"{path}: size {raw.size} is not a multiple of 3073")
    rec = raw.reshape(-1, 3073)
    return Dataset(rec[:, 1:].reshape(-1, 3, 32, 32).astype(np.float64) / 255.0, rec[:, 0], 10, Path(path).name)


def make_blobs(num_classes: int, per_class: int, dim: int, spread: float, seed: int, radius: float = 1.0) -> Dataset:
    """Isotropic Gaussian blobs with class centers on a circle in the first two dims."""
    if min(num_classes, per_class, dim) < 1 or spread <= 0:
        raise ValueError("make_blobs: counts must be positive and spread > 0")
    angles = 2 * np.pi * np.arange(num_classes) / num_classes
    centers = np.zeros((num_classes, dim))
    if dim == 1:
        centers[:, 0] = radius * np.arange(num_classes)
    else:
        centers[:, 0] = radius * np.cos(angles)
        centers[:, 1] = radius * np.sin(angles)
    rng = np.random.default_rng(seed)
    labels = np.repeat(np.arange(num_classes), per_class)
    points = centers[labels] + spread * rng.standard_normal((labels.size, dim))
    order = rng.permutation(labels.size)
    meta = {"generator": "blobs", "seed": seed, "spread": spread, "dim": dim, "centers": centers.tolist()}
    return Dataset(points[order], labels[order], num_classes, f"blobs-{num_classes}x{per_class}", meta)


def downscale(dataset: Dataset, factor: int = 2) -> Dataset:
    """Average-pool the two trailing spatial dims by ``factor``."""
    imgs = dataset.images
    h, w = imgs.shape[-2:]
    if h % factor or w % factor:
        raise ValueError(f"downscale: spatial dims {h}x{w} not divisible by {factor}")
    pooled = imgs.reshape(*imgs.shape[:-2], h // factor, factor, w // factor, factor).mean(axis=(-3, -1))
    return Dataset(pooled, dataset.labels.copy(), dataset.num_classes, dataset.name, dict(dataset.meta))


def subsample_per_class(dataset: Dataset, per_class: int, seed: int) -> Dataset:
    """Keep at most ``per_class`` examples of each class, preserving original order."""
    rng = np.random.default_rng(seed)
    keep = []
    for c in range(dataset.num_classes):
        idx = np.flatnonzero(dataset.labels == c)
        if len(idx) > per_class:
            idx = np.sort(rng.choice(idx, size=per_class, replace=False))
        keep.append(idx)
    return dataset.subset(np.sort(np.concatenate(keep)))


def write_mnist_subset(out_dir, test_per_class: int = 100, seed: int = 0) -> Path:
    """Write the 5000-image MNIST subset bundled with ``mlxtend`` as IDX files.

    Each class's 500 images are split into ``500 - test_per_class`` train and
    ``test_per_class`` test images. Needs the optional ``mlxtend`` package.
    """
    try:
        from mlxtend.data import mnist_data
    except ImportError as exc:  # pragma: no cover - depends on environment
        raise FileNotFoundError("the bundled MNIST subset needs `pip install mlxtend`") from exc
    x, y = mnist_data()
    images = (x.reshape(-1, 28, 28) / 255.0)
    rng = np.random.default_rng(seed)
    train_idx, test_idx = [], []
    for c in range(10):
        idx = rng.permutation(np.flatnonzero(y == c))
        test_idx.append(idx[:test_per_class])
        train_idx.append(idx[test_per_class:])
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    full = Dataset(images, y, 10, "mnist-5k")
    for split, idx in (("train", train_idx), ("test", test_idx)):
        img_name, lab_name = MNIST_FILES[split]
        write_idx(full.subset(np.sort(np.concatenate(idx))), out_dir / f"{img_name}.gz", out_dir / f"{lab_name}.gz")
    return out_dir
