import gzip
import os

import numpy as np
import pytest

from repact import configuration
from repact.experiment import ConvBlockSpec, DatasetConfig, ExperimentConfig, ScheduleConfig


def write_idx_images(path, images, magic=2051, compress=False):
    images = np.asarray(images, dtype=np.uint8)
    header = magic.to_bytes(4, "big") + b"".join(int(d).to_bytes(4, "big") for d in images.shape)
    _write(path, header + images.tobytes(), compress)


def write_idx_labels(path, labels, magic=2049, compress=False):
    labels = np.asarray(labels, dtype=np.uint8)
    header = magic.to_bytes(4, "big") + len(labels).to_bytes(4, "big")
    _write(path, header + labels.tobytes(), compress)


def write_cifar_batch(path, images, labels):
    images = np.asarray(images, dtype=np.uint8).reshape(len(labels), -1)
    records = np.concatenate([np.asarray(labels, dtype=np.uint8)[:, None], images], axis=1)
    _write(path, records.tobytes(), False)


def _write(path, data, compress):
    if compress:
        with gzip.open(path, "wb") as f:
            f.write(data)
    else:
        with open(path, "wb") as f:
            f.write(data)


@pytest.fixture
def mnist_dir(tmp_path):
    """A miniature MNIST distribution: 60 train and 20 test images of 28x28."""
    rng = np.random.default_rng(7)
    root = tmp_path / "mnist"
    root.mkdir()
    for prefix, n in (("train", 60), ("t10k", 20)):
        write_idx_images(root / f"{prefix}-images-idx3-ubyte", rng.integers(0, 256, size=(n, 28, 28)))
        write_idx_labels(root / f"{prefix}-labels-idx1-ubyte", rng.integers(0, 10, size=n))
    return root


@pytest.fixture
def cifar_dir(tmp_path):
    rng = np.random.default_rng(11)
    root = tmp_path / "cifar"
    root.mkdir()
    for i in range(1, 6):
        write_cifar_batch(root / f"data_batch_{i}.bin", rng.integers(0, 256, size=(8, 3072)), rng.integers(0, 10, 8))
    write_cifar_batch(root / "test_batch.bin", rng.integers(0, 256, size=(6, 3072)), rng.integers(0, 10, 6))
    return root


def small_config(activation="repact_i", epochs=1, seed=0, **overrides):
    """Synthetic-data config small enough to train in a second."""
    fields = dict(
        dataset=DatasetConfig(name="synthetic", synthetic_train=48, synthetic_test=24, synthetic_size=8),
        model=[ConvBlockSpec(4, 3, 1, 1), ConvBlockSpec(6, 3, 2, 1), ConvBlockSpec(8, 3, 2, 1), ConvBlockSpec(8, 3, 2, 1)],
        activation=activation,
        epochs=epochs,
        batch_size=16,
        schedule=ScheduleConfig(initial=0.05, kind="cosine"),
        seed=seed,
        log_cadence=2,
        prefetch=0,
    )
    fields.update(overrides)
    return ExperimentConfig(**fields)


@pytest.fixture
def config_file(tmp_path):
    """Writes small_config(**kwargs) as JSON and returns its path."""
    import json

    def make(name="config.json", **kwargs):
        path = tmp_path / name
        path.write_text(json.dumps(small_config(**kwargs).to_dict()))
        return str(path)

    return make


@pytest.fixture(autouse=True)
def detach_log_handlers():
    """The CLI attaches handlers to the package logger; drop them after each test."""
    yield
    for kind, handler in list(configuration._handlers.items()):
        configuration.logger.removeHandler(handler)
        handler.close()
        del configuration._handlers[kind]


@pytest.fixture
def log_dir(tmp_path):
    return str(tmp_path / "logs")


mnist_root = os.environ.get("REPACT_MNIST_DIR")
requires_mnist = pytest.mark.skipif(not mnist_root, reason="REPACT_MNIST_DIR is not set")
