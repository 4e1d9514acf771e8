"""
Dataset ingestion: MNIST (IDX), CIFAR-10 (binary records) and a synthetic
stand-in, plus seeded batching with optional background prefetch.
"""

import gzip
import os
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import configuration
from .errors import DatasetFormatError, ValidationError

logger = configuration.logger

IDX_IMAGES_MAGIC = 0x00000803   # 2051
IDX_LABELS_MAGIC = 0x00000801   # 2049
CIFAR_RECORD_BYTES = 3073       # 1 label byte + 3 * 32 * 32 pixels
CIFAR_RECORDS_PER_BATCH = 10_000
NUM_CLASSES = 10

MNIST_FILES = (
    "train-images-idx3-ubyte",
    "train-labels-idx1-ubyte",
    "t10k-images-idx3-ubyte",
    "t10k-labels-idx1-ubyte",
)
CIFAR_TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
CIFAR_TEST_FILE = "test_batch.bin"


@dataclass
class DatasetSplit:
    train_images: np.ndarray   # N, C, H, W in [0, 1]
    train_labels: np.ndarray
    test_images: np.ndarray
    test_labels: np.ndarray
    name: str = ""
    num_classes: int = NUM_CLASSES

    @property
    def input_shape(self):
        return self.train_images.shape[1:]


def _read_bytes(path):
    if str(path).endswith(".gz"):
        with gzip.open(path, "rb") as f:
            return f.read()
    with open(path, "rb") as f:
        return f.read()


def select_subset(n, subset, seed):
    """Deterministic sorted index list of min(subset, n) items out of n."""
    if subset is None or subset >= n:
        return np.arange(n)
    rng = np.random.default_rng(seed)
    return np.sort(rng.permutation(n)[:subset])


# -----------------------------------------------------------------------------
# MNIST
# -----------------------------------------------------------------------------

def parse_idx(data, magic, ndim, path=None):
    """Decode an IDX container: big-endian magic, ndim extents, then uint8 payload."""
    if len(data) < 4:
        raise DatasetFormatError("file too short for an IDX magic number", path, len(data))
    found = int.from_bytes(data[:4], "big")
    if found != magic:
        raise DatasetFormatError(f"bad magic 0x{found:08x}, expected 0x{magic:08x}", path, 0)

    header = 4 + 4 * ndim
    if len(data) < header:
        raise DatasetFormatError("truncated IDX header", path, len(data))
    dims = tuple(int(d) for d in np.frombuffer(data, dtype=">u4", count=ndim, offset=4))
    count = int(np.prod(dims))
    if len(data) < header + count:
        raise DatasetFormatError(f"truncated payload, expected {header + count} bytes", path, len(data))
    return np.frombuffer(data, dtype=np.uint8, count=count, offset=header).reshape(dims)


def _check_labels(labels, path, first_offset, stride):
    bad = np.flatnonzero(labels >= NUM_CLASSES)
    if bad.size:
        i = int(bad[0])
        raise DatasetFormatError(f"label {labels[i]} out of range [0, 9]", path, first_offset + i * stride)


def _read_mnist_pair(images_path, labels_path):
    images = parse_idx(_read_bytes(images_path), IDX_IMAGES_MAGIC, 3, images_path)
    labels = parse_idx(_read_bytes(labels_path), IDX_LABELS_MAGIC, 1, labels_path)
    if images.shape[0] != labels.shape[0]:
        raise DatasetFormatError(
            f"{images.shape[0]} images but {labels.shape[0]} labels", labels_path, 4
        )
    _check_labels(labels, labels_path, 8, 1)
    images = (images.astype(np.float32) / 255.0)[:, None, :, :]
    return images, labels.astype(np.int64)


def load_mnist(train_images, train_labels, test_images, test_labels, subset=None, test_subset=None, seed=0):
    x_train, y_train = _read_mnist_pair(train_images, train_labels)
    x_test, y_test = _read_mnist_pair(test_images, test_labels)

    train_idx = select_subset(len(y_train), subset, seed)
    test_idx = select_subset(len(y_test), test_subset, seed + 1)
    logger.info(f"MNIST loaded: {len(train_idx)}/{len(y_train)} train, {len(test_idx)}/{len(y_test)} test")
    return DatasetSplit(x_train[train_idx], y_train[train_idx], x_test[test_idx], y_test[test_idx], "mnist")


# -----------------------------------------------------------------------------
# CIFAR-10
# -----------------------------------------------------------------------------

def _read_cifar_file(path):
    data = _read_bytes(path)
    whole = len(data) // CIFAR_RECORD_BYTES * CIFAR_RECORD_BYTES
    if whole != len(data) or not data:
        raise DatasetFormatError(f"truncated record, size {len(data)} is not a multiple of "
                                 f"{CIFAR_RECORD_BYTES}", path, whole)
    records = np.frombuffer(data, dtype=np.uint8).reshape(-1, CIFAR_RECORD_BYTES)
    if records.shape[0] != CIFAR_RECORDS_PER_BATCH:
        logger.debug(f"{path}: {records.shape[0]} records (a full batch file has {CIFAR_RECORDS_PER_BATCH})")
    labels = records[:, 0]
    _check_labels(labels, path, 0, CIFAR_RECORD_BYTES)
    images = records[:, 1:].reshape(-1, 3, 32, 32).astype(np.float32) / 255.0
    return images, labels.astype(np.int64)


def load_cifar10(batch_files, test_file, subset=None, test_subset=None, seed=0):
    if not batch_files:
        raise ValidationError("load_cifar10 needs at least one training batch file")
    parts = [_read_cifar_file(path) for path in batch_files]
    x_train = np.concatenate([p[0] for p in parts])
    y_train = np.concatenate([p[1] for p in parts])
    x_test, y_test = _read_cifar_file(test_file)

    train_idx = select_subset(len(y_train), subset, seed)
    test_idx = select_subset(len(y_test), test_subset, seed + 1)
    logger.info(f"CIFAR-10 loaded: {len(train_idx)}/{len(y_train)} train, {len(test_idx)}/{len(y_test)} test")
    return DatasetSplit(x_train[train_idx], y_train[train_idx], x_test[test_idx], y_test[test_idx], "cifar10")


# -----------------------------------------------------------------------------
# Synthetic
# -----------------------------------------------------------------------------

def make_synthetic(num_train=512, num_test=128, size=12, channels=1, num_classes=NUM_CLASSES, seed=0, noise=0.15):
    """Class prototypes plus Gaussian noise, clipped to [0, 1]."""
    rng = np.random.default_rng(seed)
    prototypes = rng.uniform(0.0, 1.0, size=(num_classes, channels, size, size))

    def draw(n):
        labels = rng.integers(0, num_classes, size=n)
        images = prototypes[labels] + noise * rng.standard_normal((n, channels, size, size))
        return np.clip(images, 0.0, 1.0).astype(np.float32), labels.astype(np.int64)

    x_train, y_train = draw(num_train)
    x_test, y_test = draw(num_test)
    return DatasetSplit(x_train, y_train, x_test, y_test, "synthetic", num_classes)


def input_shape_for(dataset_config):
    """(channels, size) of the images a dataset config produces."""
    if dataset_config.name == "mnist":
        return 1, 28
    if dataset_config.name == "cifar10":
        return 3, 32
    return dataset_config.synthetic_channels, dataset_config.synthetic_size


def _resolve(root, name):
    """Find name or name.gz under root."""
    for candidate in (os.path.join(root, name), os.path.join(root, name + ".gz")):
        if os.path.exists(candidate):
            return candidate
    raise FileNotFoundError(f"dataset file {name} not found under {root}")


def load_dataset(dataset_config, seed=0, num_classes=NUM_CLASSES, data_root=None):
    root = data_root or dataset_config.root
    if dataset_config.name == "mnist":
        paths = [_resolve(root, name) for name in MNIST_FILES]
        return load_mnist(*paths, subset=dataset_config.subset, test_subset=dataset_config.test_subset, seed=seed)
    if dataset_config.name == "cifar10":
        if os.path.isdir(os.path.join(root, "cifar-10-batches-bin")):
            root = os.path.join(root, "cifar-10-batches-bin")
        batches = [_resolve(root, name) for name in CIFAR_TRAIN_FILES]
        return load_cifar10(batches, _resolve(root, CIFAR_TEST_FILE), subset=dataset_config.subset,
                            test_subset=dataset_config.test_subset, seed=seed)
    split = make_synthetic(dataset_config.synthetic_train, dataset_config.synthetic_test,
                           dataset_config.synthetic_size, dataset_config.synthetic_channels, num_classes, seed)
    train_idx = select_subset(len(split.train_labels), dataset_config.subset, seed)
    test_idx = select_subset(len(split.test_labels), dataset_config.test_subset, seed + 1)
    return DatasetSplit(split.train_images[train_idx], split.train_labels[train_idx],
                        split.test_images[test_idx], split.test_labels[test_idx], "synthetic", num_classes)


# -----------------------------------------------------------------------------
# Batching
# -----------------------------------------------------------------------------

def random_crop_flip(images, rng, pad=4):
    """Random crop after zero padding, then a horizontal flip with probability 1/2."""
    n, _, h, w = images.shape
    padded = np.pad(images, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    tops = rng.integers(0, 2 * pad + 1, size=n)
    lefts = rng.integers(0, 2 * pad + 1, size=n)
    flips = rng.random(n) < 0.5
    out = np.empty_like(images)
    for i in range(n):
        crop = padded[i, :, tops[i]:tops[i] + h, lefts[i]:lefts[i] + w]
        out[i] = crop[:, :, ::-1] if flips[i] else crop
    return out


def iterate_batches(images, labels, batch_size, seed, epoch, shuffle=True, augment=False, prefetch=0):
    """Yield (images, labels) batches.

    The order comes from a generator seeded with (seed, epoch) and each
    batch's augmentation from one seeded with (seed, epoch, batch index), so
    the stream is the same whatever the prefetch depth.
    """
    n = len(labels)
    order = np.random.default_rng([seed, epoch]).permutation(n) if shuffle else np.arange(n)
    batches = [order[i:i + batch_size] for i in range(0, n, batch_size)]

    def make(index):
        idx = batches[index]
        x = images[idx]
        if augment:
            x = random_crop_flip(x, np.random.default_rng([seed, epoch, index]))
        return x, labels[idx]

    if prefetch <= 0:
        for index in range(len(batches)):
            yield make(index)
        return

    with ThreadPoolExecutor(max_workers=min(prefetch, configuration.THREADS)) as pool:
        pending = deque()
        for index in range(len(batches)):
            pending.append(pool.submit(make, index))
            if len(pending) > prefetch:
                yield pending.popleft().result()
        while pending:
            yield pending.popleft().result()
