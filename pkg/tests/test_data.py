import numpy as np
import pytest

from adnnperf.data import (
    CIFAR_ITEMS_PER_BATCH,
    CIFAR_RECORD_BYTES,
    DatasetError,
    cifar10_dataset,
    ingest_dataset,
    read_cifar_binary,
    synthetic_dataset,
)


def test_synthetic_shapes_and_range():
    ds = ingest_dataset({"kind": "synthetic", "num_classes": 10, "image_size": 32, "n_train": 5000, "n_test": 1000})
    assert tuple(ds.x_train.shape) == (5000, 3, 32, 32)
    assert tuple(ds.x_test.shape) == (1000, 3, 32, 32)
    assert ds.x_train.min() >= 0 and ds.x_train.max() <= 1
    assert set(ds.y_train.unique().tolist()) <= set(range(10))


def test_synthetic_is_deterministic():
    a = synthetic_dataset(n_train=100, n_test=10, seed=4)
    b = synthetic_dataset(n_train=100, n_test=10, seed=4)
    assert a.checksum() == b.checksum()
    assert synthetic_dataset(n_train=100, n_test=10, seed=5).checksum() != a.checksum()


def test_descriptor_mismatch():
    with pytest.raises(DatasetError):
        ingest_dataset({"kind": "synthetic", "image_size": 16, "n_train": 4, "n_test": 4}, input_shape=(3, 32, 32))
    with pytest.raises(DatasetError):
        ingest_dataset({"kind": "synthetic", "n_train": 4, "n_test": 4}, num_classes=3)
    with pytest.raises(DatasetError):
        ingest_dataset({"kind": "imagenet"})


def _write_batch(path, n, rng):
    rec = np.zeros((n, CIFAR_RECORD_BYTES), dtype=np.uint8)
    rec[:, 0] = rng.integers(0, 10, size=n)
    rec[:, 1:] = rng.integers(0, 256, size=(n, CIFAR_RECORD_BYTES - 1))
    path.write_bytes(rec.tobytes())
    return rec


def test_cifar_binary_item_count(tmp_path):
    rng = np.random.default_rng(0)
    rec = _write_batch(tmp_path / "data_batch_1.bin", CIFAR_ITEMS_PER_BATCH, rng)
    x, y = read_cifar_binary(tmp_path / "data_batch_1.bin")
    assert len(x) == len(y) == CIFAR_ITEMS_PER_BATCH
    assert y[:5].tolist() == rec[:5, 0].tolist()
    assert float(x[0, 0, 0, 0]) == pytest.approx(rec[0, 1] / 255.0)


def test_cifar_dataset_from_directory(tmp_path):
    rng = np.random.default_rng(1)
    _write_batch(tmp_path / "data_batch_1.bin", 20, rng)
    _write_batch(tmp_path / "test_batch.bin", 7, rng)
    ds = ingest_dataset({"kind": "cifar10_binary", "path": str(tmp_path)}, input_shape=(3, 32, 32))
    assert len(ds.x_train) == 20 and len(ds.x_test) == 7
    assert len(cifar10_dataset(tmp_path, limit_train=5).x_train) == 5


def test_corrupt_archive(tmp_path):
    (tmp_path / "bad.bin").write_bytes(b"\x00" * (CIFAR_RECORD_BYTES + 3))
    with pytest.raises(DatasetError):
        read_cifar_binary(tmp_path / "bad.bin")
    with pytest.raises(DatasetError):
        cifar10_dataset(tmp_path / "missing")
