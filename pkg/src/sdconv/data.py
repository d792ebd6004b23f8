"""MNIST (IDX) and CIFAR-10 (binary batch) readers."""
from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from sdconv.errors import ConfigError, IngestionError

IDX_IMAGES = 0x00000803
IDX_LABELS = 0x00000801

MNIST_MEAN, MNIST_STD = (0.1307,), (0.3081,)
CIFAR_MEAN, CIFAR_STD = (0.4914, 0.4822, 0.4465), (0.2470, 0.2435, 0.2616)
CIFAR_RECORD = 1 + 3 * 32 * 32

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}
CIFAR_FILES = {
    "train": tuple(f"data_batch_{i}.bin" for i in range(1, 6)),
    "test": ("test_batch.bin",),
}


@dataclass
class Dataset:
    images: np.ndarray  # [N, C, H, W] float32, normalized
    labels: np.ndarray  # [N] int64
    name: str = ""

    def __len__(self):
        return len(self.labels)

    def subset(self, limit):
        if not limit or limit >= len(self):
            return self
        return Dataset(self.images[:limit], self.labels[:limit], self.name)

    def batches(self, batch_size, rng=None, augment=None):
        """Yield (images, labels) mini-batches, shuffled when ``rng`` is given."""
        order = rng.permutation(len(self)) if rng is not None else np.arange(len(self))
        for start in range(0, len(self), batch_size):
            idx = order[start:start + batch_size]
            x = self.images[idx]
            if augment is not None:
                x = augment(x)
            yield x, self.labels[idx]

    def __iter__(self):
        for i in range(len(self)):
            yield self.images[i], int(self.labels[i])


def _read(path):
    path = Path(path)
    if not path.exists():
        gz = path.with_name(path.name + ".gz")
        if gz.exists():
            path = gz
        else:
            raise IngestionError(f"missing file {path}", offset=0)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as fh:
        return fh.read()


def parse_idx(buf, expected_magic):
    """Parse an IDX byte string into a uint8 array."""
    if len(buf) < 8:
        raise IngestionError("truncated IDX header", offset=len(buf))
    magic = struct.unpack(">I", buf[:4])[0]
    if magic != expected_magic:
        raise IngestionError(f"bad IDX magic 0x{magic:08x}, expected 0x{expected_magic:08x}", offset=0)
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(buf) < header:
        raise IngestionError("truncated IDX dimension table", offset=len(buf))
    dims = struct.unpack(f">{ndim}I", buf[4:header])
    count = int(np.prod(dims))
    if len(buf) < header + count:
        raise IngestionError(f"truncated IDX payload: need {count} bytes", offset=len(buf))
    return np.frombuffer(buf, dtype=np.uint8, count=count, offset=header).reshape(dims)


def parse_cifar(buf):
    if len(buf) % CIFAR_RECORD:
        whole = len(buf) // CIFAR_RECORD * CIFAR_RECORD
        raise IngestionError(f"CIFAR-10 file is not a whole number of {CIFAR_RECORD}-byte records",
                             offset=whole)
    records = np.frombuffer(buf, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = records[:, 0].astype(np.int64)
    bad = np.flatnonzero(labels > 9)
    if bad.size:
        raise IngestionError(f"CIFAR-10 label {labels[bad[0]]} out of range", offset=int(bad[0]) * CIFAR_RECORD)
    return records[:, 1:].reshape(-1, 3, 32, 32), labels


def normalize(pixels, mean, std):
    x = pixels.astype(np.float32) / np.float32(255.0)
    m = np.asarray(mean, np.float32).reshape(1, -1, 1, 1)
    s = np.asarray(std, np.float32).reshape(1, -1, 1, 1)
    return ((x - m) / s).astype(np.float32)


def load_mnist(root, split="train"):
    img_name, lbl_name = MNIST_FILES[split]
    images = parse_idx(_read(Path(root) / img_name), IDX_IMAGES)
    labels = parse_idx(_read(Path(root) / lbl_name), IDX_LABELS).astype(np.int64)
    if len(images) != len(labels):
        raise IngestionError(f"{len(images)} images but {len(labels)} labels", offset=8)
    return Dataset(normalize(images[:, None], MNIST_MEAN, MNIST_STD), labels, f"mnist-{split}")


def load_cifar10(root, split="train"):
    root = Path(root)
    if (root / "cifar-10-batches-bin").is_dir():
        root = root / "cifar-10-batches-bin"
    parts = [parse_cifar(_read(root / name)) for name in CIFAR_FILES[split]]
    pixels = np.concatenate([p for p, _ in parts])
    labels = np.concatenate([l for _, l in parts])
    return Dataset(normalize(pixels, CIFAR_MEAN, CIFAR_STD), labels, f"cifar10-{split}")


def data_root(dataset, path=None):
    base = path or os.environ.get("SDCONV_DATA_DIR")
    if not base:
        raise ConfigError("no dataset path given and SDCONV_DATA_DIR is unset")
    base = Path(base)
    sub = base / dataset
    return sub if sub.is_dir() else base


def load_dataset(dataset, path=None, split="train"):
    root = data_root(dataset, path)
    if dataset == "mnist":
        return load_mnist(root, split)
    if dataset == "cifar10":
        return load_cifar10(root, split)
    raise ConfigError(f"unknown dataset {dataset!r}")


def flip_crop(rng, pad=4):
    """Random horizontal flip plus pad-and-crop, for CIFAR-10 batches."""

    def augment(x):
        n, c, h, w = x.shape
        flip = rng.random(n) < 0.5
        x = np.where(flip[:, None, None, None], x[..., ::-1], x)
        padded = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
        dy = rng.integers(0, 2 * pad + 1, n)
        dx = rng.integers(0, 2 * pad + 1, n)
        out = np.empty_like(x)
        for i in range(n):
            out[i] = padded[i, :, dy[i]:dy[i] + h, dx[i]:dx[i] + w]
        return out

    return augment
