"""Dataset ingestion: a built-in synthetic image task and CIFAR-10 binary archives."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

CIFAR_RECORD_BYTES = 1 + 3 * 32 * 32
CIFAR_ITEMS_PER_BATCH = 10000
CIFAR_TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
CIFAR_TEST_FILES = ("test_batch.bin",)


class DatasetError(ValueError):
    pass


@dataclass
class Dataset:
    x_train: torch.Tensor
    y_train: torch.Tensor
    x_test: torch.Tensor
    y_test: torch.Tensor
    num_classes: int

    @property
    def input_shape(self) -> tuple:
        return tuple(self.x_train.shape[1:])

    def checksum(self, n: int = 64) -> str:
        h = hashlib.sha256()
        h.update(self.x_train[:n].numpy().tobytes())
        h.update(self.y_train[:n].numpy().tobytes())
        return h.hexdigest()


def synthetic_dataset(
    num_classes: int = 10,
    image_size: int = 32,
    channels: int = 3,
    n_train: int = 5000,
    n_test: int = 1000,
    seed: int = 0,
    contrast: tuple = (0.02, 0.15),
    noise: tuple = (0.05, 0.3),
) -> Dataset:
    """Class prototypes (smooth random patterns) plus per-sample contrast and noise.

    Contrast and noise level vary per sample, so inputs range from easy to
    hard, which is what gives a gated model something to adapt to.
    """
    if min(num_classes, image_size, channels, n_train, n_test) <= 0:
        raise DatasetError("synthetic dataset dimensions must be positive")
    rng = np.random.default_rng(seed)
    coarse = rng.normal(size=(num_classes, channels, 4, 4)).astype(np.float32)
    protos = F.interpolate(torch.from_numpy(coarse), size=(image_size, image_size), mode="bilinear", align_corners=False)
    protos = protos / protos.flatten(1).std(dim=1).view(-1, 1, 1, 1)

    def draw(n):
        y = rng.integers(0, num_classes, size=n)
        amp = rng.uniform(*contrast, size=(n, 1, 1, 1)).astype(np.float32)
        sigma = rng.uniform(*noise, size=(n, 1, 1, 1)).astype(np.float32)
        eps = rng.normal(size=(n, channels, image_size, image_size)).astype(np.float32)
        x = 0.5 + amp * protos[y].numpy() + sigma * eps
        return torch.from_numpy(np.clip(x, 0.0, 1.0).astype(np.float32)), torch.from_numpy(y.astype(np.int64))

    x_train, y_train = draw(n_train)
    x_test, y_test = draw(n_test)
    return Dataset(x_train, y_train, x_test, y_test, num_classes)


def read_cifar_binary(path) -> tuple:
    """Parse one CIFAR-10 binary batch: records of 1 label byte + 3072 pixels."""
    raw = Path(path).read_bytes()
    if len(raw) == 0 or len(raw) % CIFAR_RECORD_BYTES:
        raise DatasetError(f"{path}: size {len(raw)} is not a whole number of CIFAR-10 records")
    arr = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD_BYTES)
    labels = arr[:, 0].astype(np.int64)
    if labels.max() > 9:
        raise DatasetError(f"{path}: label byte out of range")
    images = arr[:, 1:].reshape(-1, 3, 32, 32).astype(np.float32) / 255.0
    return torch.from_numpy(images), torch.from_numpy(labels)


def cifar10_dataset(root, limit_train: int | None = None, limit_test: int | None = None) -> Dataset:
    root = Path(root)
    parts = []
    for names in (CIFAR_TRAIN_FILES, CIFAR_TEST_FILES):
        files = [root / n for n in names if (root / n).exists()]
        if not files:
            raise DatasetError(f"{root}: none of {names} found")
        xs, ys = zip(*(read_cifar_binary(f) for f in files))
        parts.append((torch.cat(xs), torch.cat(ys)))
    (x_train, y_train), (x_test, y_test) = parts
    if limit_train:
        x_train, y_train = x_train[:limit_train], y_train[:limit_train]
    if limit_test:
        x_test, y_test = x_test[:limit_test], y_test[:limit_test]
    return Dataset(x_train, y_train, x_test, y_test, 10)


def ingest_dataset(descriptor: dict, input_shape: tuple | None = None, num_classes: int | None = None) -> Dataset:
    """Load the dataset named by ``descriptor``.

    ``{"kind": "synthetic", ...}`` takes the keyword arguments of
    :func:`synthetic_dataset`; ``{"kind": "cifar10_binary", "path": ...}``
    reads the binary archive directory.
    """
    desc = dict(descriptor)
    kind = desc.pop("kind", "synthetic")
    if kind == "synthetic":
        ds = synthetic_dataset(**desc)
    elif kind == "cifar10_binary":
        ds = cifar10_dataset(desc["path"], desc.get("limit_train"), desc.get("limit_test"))
    else:
        raise DatasetError(f"unknown dataset kind {kind!r}")
    if input_shape is not None and tuple(input_shape) != ds.input_shape:
        raise DatasetError(f"dataset shape {ds.input_shape} does not match model input {tuple(input_shape)}")
    if num_classes is not None and num_classes != ds.num_classes:
        raise DatasetError(f"dataset has {ds.num_classes} classes, model expects {num_classes}")
    return ds
