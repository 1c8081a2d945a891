"""Dataset loading and open-set task construction.

Readers for the two canonical binary formats (IDX image/label files and
CIFAR-10 batch files), grayscale conversion, open-set split simulation with
seeded known-class selection, and deterministic mini-batch iteration.

All randomness flows through explicit integer seeds; repeating a call with
the same inputs reproduces splits and batch orders exactly.
"""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

IDX_IMAGES_MAGIC = 2051
IDX_LABELS_MAGIC = 2049
CIFAR_RECORD_BYTES = 3073  # 1 label byte + 32*32*3 pixel bytes
PAD_WIDTH = 2  # symmetric zero padding: 28 -> 32, 32 -> 36


class DataFormatError(ValueError):
    """Raised when a dataset file does not match its declared binary format."""


@dataclass
class RawDataset:
    """Unprocessed images (uint8) with integer class labels."""

    images: np.ndarray  # (N, H, W) grayscale or (N, H, W, 3) color
    labels: np.ndarray  # (N,) in 0..9
    name: str

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise DataFormatError(
                f"{self.name}: {len(self.images)} images vs {len(self.labels)} labels")

    def __len__(self) -> int:
        return len(self.images)

    @property
    def num_classes(self) -> int:
        return int(self.labels.max()) + 1


@dataclass
class ImageBatch:
    """Normalized, padded image tensor with labels: the unit of training."""

    pixels: np.ndarray  # (N, Hp, Wp, 1) float32 in [0, 1]
    labels: np.ndarray  # (N,)


@dataclass
class OpenSetSplit:
    """A simulated open-set task over a 10-class source dataset.

    Training data is restricted to the chosen known classes and relabeled
    densely to 0..C-1; the test partition keeps every source test sample,
    with all unknown-class samples relabeled to C.
    """

    known_classes: tuple[int, ...]
    label_map: dict[int, int]
    train_images: np.ndarray
    train_labels: np.ndarray
    test_images: np.ndarray
    test_labels: np.ndarray
    seed: int
    dataset_name: str
    num_test_classes: int = 10  # original class count of the test partition

    @property
    def num_known(self) -> int:
        return len(self.known_classes)

    @property
    def unknown_label(self) -> int:
        return self.num_known


def _open_maybe_gzip(path: Path):
    with open(path, "rb") as f:
        magic = f.read(2)
    if magic == b"\x1f\x8b":
        return gzip.open(path, "rb")
    return open(path, "rb")


def load_idx(images_path: str | Path, labels_path: str | Path,
             name: str | None = None) -> RawDataset:
    """Read an IDX image file + IDX label file pair (plain or gzipped).

    Validates the big-endian magic numbers, the header dimensions against
    the payload length, and the image/label count agreement.
    """
    images_path, labels_path = Path(images_path), Path(labels_path)
    with _open_maybe_gzip(labels_path) as f:
        header = f.read(8)
        if len(header) < 8:
            raise DataFormatError(f"{labels_path}: truncated IDX header")
        magic, n_labels = struct.unpack(">II", header)
        if magic != IDX_LABELS_MAGIC:
            raise DataFormatError(
                f"{labels_path}: wrong magic number {magic} (expected {IDX_LABELS_MAGIC})")
        raw = f.read(n_labels)
        if len(raw) < n_labels:
            raise DataFormatError(f"{labels_path}: truncated label payload")
        labels = np.frombuffer(raw, dtype=np.uint8).astype(np.int64)
    with _open_maybe_gzip(images_path) as f:
        header = f.read(16)
        if len(header) < 16:
            raise DataFormatError(f"{images_path}: truncated IDX header")
        magic, n_images, rows, cols = struct.unpack(">IIII", header)
        if magic != IDX_IMAGES_MAGIC:
            raise DataFormatError(
                f"{images_path}: wrong magic number {magic} (expected {IDX_IMAGES_MAGIC})")
        raw = f.read(n_images * rows * cols)
        if len(raw) < n_images * rows * cols:
            raise DataFormatError(f"{images_path}: truncated image payload")
        images = np.frombuffer(raw, dtype=np.uint8).reshape(n_images, rows, cols)
    if n_images != n_labels:
        raise DataFormatError(
            f"{images_path.name}: {n_images} images but {n_labels} labels")
    return RawDataset(images=images, labels=labels,
                      name=name or images_path.stem.split(".")[0])


def load_cifar10(data_dir: str | Path) -> tuple[RawDataset, RawDataset]:
    """Read the six canonical CIFAR-10 binary batch files from a directory.

    Returns (train, test) with channel-planar records decoded to HxWx3.
    """
    data_dir = Path(data_dir)
    train_files = [data_dir / f"data_batch_{i}.bin" for i in range(1, 6)]
    test_files = [data_dir / "test_batch.bin"]

    def read_batches(paths):
        images, labels = [], []
        for path in paths:
            if not path.exists():
                raise DataFormatError(f"missing CIFAR-10 batch file: {path}")
            raw = path.read_bytes()
            if len(raw) % CIFAR_RECORD_BYTES != 0:
                raise DataFormatError(
                    f"{path}: length {len(raw)} is not a multiple of {CIFAR_RECORD_BYTES}")
            records = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD_BYTES)
            labels.append(records[:, 0].astype(np.int64))
            # channel-planar: 1024 red, 1024 green, 1024 blue
            planes = records[:, 1:].reshape(-1, 3, 32, 32)
            images.append(planes.transpose(0, 2, 3, 1))
        return np.concatenate(images), np.concatenate(labels)

    train_images, train_labels = read_batches(train_files)
    test_images, test_labels = read_batches(test_files)
    return (RawDataset(train_images, train_labels, "cifar10-train"),
            RawDataset(test_images, test_labels, "cifar10-test"))


MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


def _find_idx_file(data_dir: Path, stem: str) -> Path:
    for candidate in (data_dir / stem, data_dir / f"{stem}.gz"):
        if candidate.exists():
            return candidate
    raise FileNotFoundError(f"no {stem}[.gz] under {data_dir}")


def load_dataset(name: str, data_dir: str | Path) -> tuple[RawDataset, RawDataset]:
    """Load a named dataset as (train, test) grayscale RawDatasets.

    'mnist' and 'fashion_mnist' expect the four canonical IDX files in
    `data_dir` (optionally gzipped); 'cifar10' expects the six binary
    batches and is converted to grayscale on load.
    """
    data_dir = Path(data_dir)
    if name in ("mnist", "fashion_mnist"):
        parts = []
        for split_name in ("train", "test"):
            img_stem, lab_stem = MNIST_FILES[split_name]
            ds = load_idx(_find_idx_file(data_dir, img_stem),
                          _find_idx_file(data_dir, lab_stem),
                          name=f"{name}-{split_name}")
            parts.append(ds)
        return parts[0], parts[1]
    if name == "cifar10":
        train, test = load_cifar10(data_dir)
        return (RawDataset(to_grayscale(train.images), train.labels, train.name),
                RawDataset(to_grayscale(test.images), test.labels, test.name))
    raise ValueError(f"unknown dataset {name!r}")


def to_grayscale(rgb: np.ndarray) -> np.ndarray:
    """Luma conversion (ITU-R BT.601): round(0.299 R + 0.587 G + 0.114 B)."""
    if rgb.shape[-1] != 3:
        raise ValueError(f"expected 3-channel input, got shape {rgb.shape}")
    weights = np.array([0.299, 0.587, 0.114])
    gray = (rgb.astype(np.float64) @ weights).round()
    return np.clip(gray, 0, 255).astype(np.uint8)


def make_open_set_split(ds_train: RawDataset, ds_test: RawDataset,
                        num_known: int = 6, seed: int = 0) -> OpenSetSplit:
    """Simulate an open-set task: draw `num_known` known classes with the
    given seed, keep only those in training (relabeled 0..C-1), and keep the
    full test set with unknown-class samples relabeled to C."""
    if not 2 <= num_known <= 9:
        raise ValueError(f"num_known must be in [2, 9], got {num_known}")
    classes = np.unique(ds_train.labels)
    rng = np.random.default_rng(seed)
    known = np.sort(rng.choice(classes, size=num_known, replace=False))
    label_map = {int(orig): dense for dense, orig in enumerate(known)}

    train_mask = np.isin(ds_train.labels, known)
    train_images = ds_train.images[train_mask]
    train_labels = np.array([label_map[int(l)] for l in ds_train.labels[train_mask]],
                            dtype=np.int64)

    unknown = num_known
    test_labels = np.full(len(ds_test), unknown, dtype=np.int64)
    for orig, dense in label_map.items():
        test_labels[ds_test.labels == orig] = dense

    return OpenSetSplit(
        known_classes=tuple(int(c) for c in known),
        label_map=label_map,
        train_images=train_images,
        train_labels=train_labels,
        test_images=ds_test.images.copy(),
        test_labels=test_labels,
        seed=seed,
        dataset_name=ds_train.name,
        num_test_classes=len(np.unique(ds_test.labels)),
    )


def prepare_batch(split: OpenSetSplit, indices: np.ndarray,
                  subset: str = "train") -> ImageBatch:
    """Normalize selected samples to [0,1] float32 and zero-pad each border
    by 2 pixels (28 -> 32, 32 -> 36), adding the channel axis."""
    if subset == "train":
        images, labels = split.train_images, split.train_labels
    elif subset == "test":
        images, labels = split.test_images, split.test_labels
    else:
        raise ValueError(f"subset must be 'train' or 'test', got {subset!r}")
    indices = np.asarray(indices)
    if indices.size and (indices.min() < 0 or indices.max() >= len(images)):
        raise IndexError(f"index out of range for {subset} set of size {len(images)}")
    sel = images[indices].astype(np.float32) / 255.0
    n, h, w = sel.shape
    p = PAD_WIDTH
    pixels = np.zeros((n, h + 2 * p, w + 2 * p, 1), dtype=np.float32)
    pixels[:, p:p + h, p:p + w, 0] = sel
    return ImageBatch(pixels=pixels, labels=labels[indices].copy())


def batch_iterator(split: OpenSetSplit, batch_size: int, epoch_seed: int,
                   subset: str = "train", limit: int | None = None):
    """One shuffled pass over the subset; every sample visited exactly once,
    last batch possibly smaller. Ordering is a pure function of epoch_seed."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    n = len(split.train_images if subset == "train" else split.test_images)
    order = np.random.default_rng(epoch_seed).permutation(n)
    if limit is not None:
        order = order[:limit]
    for start in range(0, len(order), batch_size):
        yield prepare_batch(split, order[start:start + batch_size], subset)


def stratified_batch_iterator(split: OpenSetSplit, batch_size: int, epoch_seed: int,
                              limit: int | None = None):
    """Shuffled pass over the training set that interleaves classes
    round-robin, so every batch of size >= 2 contains at least two classes
    until the final remainder. Used by the representation losses."""
    if batch_size < 2:
        raise ValueError("stratified batches need batch_size >= 2")
    rng = np.random.default_rng(epoch_seed)
    labels = split.train_labels
    per_class = []
    for c in range(split.num_known):
        idx = np.flatnonzero(labels == c)
        per_class.append(idx[rng.permutation(len(idx))])
    if limit is not None:
        share = max(1, limit // max(1, len(per_class)))
        per_class = [idx[:share] for idx in per_class]
    longest = max((len(idx) for idx in per_class), default=0)
    order = []
    for i in range(longest):
        for idx in per_class:
            if i < len(idx):
                order.append(idx[i])
    order = np.array(order, dtype=np.int64)
    for start in range(0, len(order), batch_size):
        yield prepare_batch(split, order[start:start + batch_size])
