"""MNIST / CIFAR-10 ingestion, splitting, normalization and batching."""
from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import torch

NUM_CLASSES = 10

MNIST_IMAGES_MAGIC = 0x00000803
MNIST_LABELS_MAGIC = 0x00000801
CIFAR_RECORD = 1 + 3 * 32 * 32
CIFAR_TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
CIFAR_TEST_FILE = "test_batch.bin"

# (train, val, test) sizes of the canonical splits; the first two partition
# the original training set.
SCHEMES = {
    "mnist": (50_000, 10_000, 10_000),
    "cifar": (45_000, 5_000, 10_000),
}

IMAGE_SHAPES = {"mnist": (1, 28, 28), "cifar": (3, 32, 32)}


class DataFormatError(ValueError):
    def __init__(self, message, path=None, offset=None):
        where = f" ({path} @ byte {offset})" if path is not None else ""
        super().__init__(message + where)
        self.path = path
        self.offset = offset


@dataclass(frozen=True)
class Dataset:
    images: np.ndarray          # float32, N x C x H x W
    labels: np.ndarray          # int64, N
    split: str = "train"
    kind: str = "mnist"
    mean: float | None = None   # normalization record
    std: float | None = None

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise ValueError("image and label counts differ")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= NUM_CLASSES):
            raise ValueError("labels must lie in [0, 9]")

    def __len__(self):
        return len(self.labels)

    def subset(self, idx, split=None) -> "Dataset":
        idx = np.asarray(idx)
        return replace(self, images=self.images[idx], labels=self.labels[idx],
                       split=self.split if split is None else split)

    def tensors(self, idx=None, dtype=torch.float32):
        images = self.images if idx is None else self.images[np.asarray(idx)]
        labels = self.labels if idx is None else self.labels[np.asarray(idx)]
        return torch.as_tensor(images, dtype=dtype), torch.as_tensor(labels)


# ---------------------------------------------------------------------------
# raw formats

def _open(path):
    path = Path(path)
    if not path.exists() and Path(str(path) + ".gz").exists():
        path = Path(str(path) + ".gz")
    if not path.exists():
        raise FileNotFoundError(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as fh:
        return path, fh.read()


def read_idx_images(path) -> np.ndarray:
    path, raw = _open(path)
    if len(raw) < 16:
        raise DataFormatError("truncated IDX header", path, len(raw))
    magic, count, rows, cols = struct.unpack(">IIII", raw[:16])
    if magic != MNIST_IMAGES_MAGIC:
        raise DataFormatError(f"bad image magic 0x{magic:08x}", path, 0)
    need = 16 + count * rows * cols
    if len(raw) < need:
        raise DataFormatError(f"truncated image data: expected {need} bytes, got {len(raw)}", path, len(raw))
    pixels = np.frombuffer(raw, dtype=np.uint8, count=count * rows * cols, offset=16)
    return pixels.reshape(count, 1, rows, cols)


def read_idx_labels(path) -> np.ndarray:
    path, raw = _open(path)
    if len(raw) < 8:
        raise DataFormatError("truncated IDX header", path, len(raw))
    magic, count = struct.unpack(">II", raw[:8])
    if magic != MNIST_LABELS_MAGIC:
        raise DataFormatError(f"bad label magic 0x{magic:08x}", path, 0)
    if len(raw) < 8 + count:
        raise DataFormatError(f"truncated label data: expected {8 + count} bytes, got {len(raw)}", path, len(raw))
    labels = np.frombuffer(raw, dtype=np.uint8, count=count, offset=8).astype(np.int64)
    if labels.max(initial=0) >= NUM_CLASSES:
        bad = int(np.argmax(labels >= NUM_CLASSES))
        raise DataFormatError(f"label {labels[bad]} out of range", path, 8 + bad)
    return labels


def write_idx(path, images=None, labels=None):
    """Write an IDX image (uint8, N x H x W) or label file; used by tooling and tests."""
    path = Path(path)
    if images is not None:
        images = np.asarray(images, dtype=np.uint8).reshape(len(images), images.shape[-2], images.shape[-1])
        payload = struct.pack(">IIII", MNIST_IMAGES_MAGIC, *images.shape) + images.tobytes()
    else:
        labels = np.asarray(labels, dtype=np.uint8)
        payload = struct.pack(">II", MNIST_LABELS_MAGIC, len(labels)) + labels.tobytes()
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "wb") as fh:
        fh.write(payload)


def _mnist_pair(root, prefix):
    images = read_idx_images(Path(root) / f"{prefix}-images-idx3-ubyte")
    labels = read_idx_labels(Path(root) / f"{prefix}-labels-idx1-ubyte")
    if len(images) != len(labels):
        raise DataFormatError(f"{prefix}: {len(images)} images but {len(labels)} labels", root, 4)
    return images, labels


def load_mnist(path):
    """Return raw ``(train, test)`` datasets with pixels in [0, 255]."""
    train_x, train_y = _mnist_pair(path, "train")
    test_x, test_y = _mnist_pair(path, "t10k")
    return (Dataset(train_x.astype(np.float32), train_y, "train", "mnist"),
            Dataset(test_x.astype(np.float32), test_y, "test", "mnist"))


def read_cifar_file(path):
    path, raw = _open(path)
    if len(raw) % CIFAR_RECORD:
        whole = len(raw) - len(raw) % CIFAR_RECORD
        raise DataFormatError(f"partial CIFAR record ({len(raw)} bytes)", path, whole)
    records = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = records[:, 0].astype(np.int64)
    if labels.max(initial=0) >= NUM_CLASSES:
        bad = int(np.argmax(labels >= NUM_CLASSES))
        raise DataFormatError(f"label {labels[bad]} out of range", path, bad * CIFAR_RECORD)
    return records[:, 1:].reshape(-1, 3, 32, 32), labels


def load_cifar10(path):
    root = Path(path)
    parts = [read_cifar_file(root / name) for name in CIFAR_TRAIN_FILES]
    test_x, test_y = read_cifar_file(root / CIFAR_TEST_FILE)
    train_x = np.concatenate([p[0] for p in parts])
    train_y = np.concatenate([p[1] for p in parts])
    return (Dataset(train_x.astype(np.float32), train_y, "train", "cifar"),
            Dataset(test_x.astype(np.float32), test_y, "test", "cifar"))


def load(kind, root):
    if kind == "mnist":
        return load_mnist(root)
    if kind == "cifar":
        return load_cifar10(root)
    raise ValueError(f"unknown dataset {kind!r}")


def data_root(root=None, kind=None):
    """Resolve a dataset directory from an explicit path or ``GTN_DATA_DIR``."""
    if root is None:
        env = os.environ.get("GTN_DATA_DIR")
        if env is None:
            return None
        root = Path(env)
        if kind is not None and (root / kind).is_dir():
            root = root / kind
    return Path(root)


# ---------------------------------------------------------------------------
# normalization, splitting, augmentation

def normalize(dataset: Dataset, mean=None, std=None) -> Dataset:
    """Standardize to zero mean / unit variance (statistics from ``dataset`` by default)."""
    images = dataset.images.astype(np.float64)
    if mean is None:
        mean = float(images.mean())
        std = float(images.std())
    out = ((images - mean) / std).astype(np.float32)
    return replace(dataset, images=out, mean=mean, std=std)


def split_sizes(n, scheme):
    train, val, _ = SCHEMES[scheme]
    if n == train + val:
        return train, val
    # non-canonical (e.g. subset) files keep the canonical train:val ratio
    n_train = int(round(n * train / (train + val)))
    return n_train, n - n_train


def split(train: Dataset, test: Dataset, scheme: str, seed=0):
    """Uniformly split the original training set into train/val; test is kept."""
    n_train, _ = split_sizes(len(train), scheme)
    perm = np.random.default_rng(seed).permutation(len(train))
    return (train.subset(np.sort(perm[:n_train]), "train"),
            train.subset(np.sort(perm[n_train:]), "val"),
            test.subset(np.arange(len(test)), "test"))


@dataclass(frozen=True)
class Splits:
    train: Dataset
    val: Dataset
    test: Dataset

    @property
    def kind(self):
        return self.train.kind


def prepare(kind, root, seed=0) -> Splits:
    """Load, split and normalize a dataset with statistics of the train split."""
    raw_train, raw_test = load(kind, root)
    train, val, test = split(raw_train, raw_test, kind, seed)
    train = normalize(train)
    return Splits(train, normalize(val, train.mean, train.std), normalize(test, train.mean, train.std))


def flip(batch: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    return torch.where(mask.reshape(-1, 1, 1, 1), batch.flip(3), batch)


def crop(batch: torch.Tensor, offsets, pad=4) -> torch.Tensor:
    """Crop each image from a zero-padded canvas at (dy, dx) offsets."""
    h, w = batch.shape[2:]
    canvas = torch.nn.functional.pad(batch, (pad, pad, pad, pad))
    return torch.stack([canvas[i, :, dy:dy + h, dx:dx + w] for i, (dy, dx) in enumerate(offsets)])


def augment(batch: torch.Tensor, kind: str, rng: np.random.Generator, pad=4, p_flip=0.5):
    """Random horizontal flips and padded random crops for CIFAR; MNIST passes through."""
    if kind != "cifar":
        return batch
    n = batch.shape[0]
    mask = torch.as_tensor(rng.random(n) < p_flip)
    offsets = rng.integers(0, 2 * pad + 1, size=(n, 2))
    return crop(flip(batch, mask), offsets, pad)


def one_hot(labels, dtype=torch.float32):
    return torch.nn.functional.one_hot(torch.as_tensor(labels).long(), NUM_CLASSES).to(dtype)


class BatchSampler:
    """Epoch-style sampling without replacement, addressable by batch index.

    Batch ``i`` is a pure function of ``(seed, i)`` so a run can resume from
    an iteration counter alone.
    """

    def __init__(self, n, batch_size, seed=0):
        if batch_size > n:
            raise ValueError(f"batch size {batch_size} exceeds split size {n}")
        self.n = n
        self.batch_size = batch_size
        self.seed = seed
        self.per_epoch = n // batch_size
        self._cache = (None, None)

    def _perm(self, epoch):
        if self._cache[0] != epoch:
            self._cache = (epoch, np.random.default_rng([self.seed, epoch]).permutation(self.n))
        return self._cache[1]

    def indices(self, i):
        epoch, pos = divmod(i, self.per_epoch)
        return self._perm(epoch)[pos * self.batch_size:(pos + 1) * self.batch_size]


def real_batch(dataset: Dataset, batch_size, rng: np.random.Generator, dtype=torch.float32,
               augment_batch=True):
    """One uniformly drawn batch (without replacement) with one-hot labels."""
    if batch_size > len(dataset):
        raise ValueError(f"batch size {batch_size} exceeds split size {len(dataset)}")
    idx = rng.permutation(len(dataset))[:batch_size]
    x, y = dataset.tensors(idx, dtype)
    if augment_batch:
        x = augment(x, dataset.kind, rng)
    return x, one_hot(y, dtype)
