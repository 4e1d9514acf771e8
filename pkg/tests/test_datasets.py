import numpy as np
import pytest

from conftest import write_cifar_batch, write_idx_images, write_idx_labels
from repact import datasets
from repact.datasets import (
    iterate_batches,
    load_cifar10,
    load_dataset,
    load_mnist,
    make_synthetic,
    parse_idx,
    random_crop_flip,
    select_subset,
)
from repact.errors import DatasetFormatError, ValidationError
from repact.experiment import DatasetConfig


def mnist_paths(root):
    return [root / name for name in datasets.MNIST_FILES]


class TestMnist:
    def test_load(self, mnist_dir):
        split = load_mnist(*mnist_paths(mnist_dir))
        assert split.train_images.shape == (60, 1, 28, 28)
        assert split.test_images.shape == (20, 1, 28, 28)
        assert split.train_images.dtype == np.float32
        assert 0.0 <= split.train_images.min() and split.train_images.max() <= 1.0
        assert split.train_labels.dtype == np.int64

    def test_pixels_scaled(self, tmp_path):
        write_idx_images(tmp_path / "img", np.full((2, 28, 28), 255))
        write_idx_labels(tmp_path / "lbl", [3, 4])
        paths = [tmp_path / "img", tmp_path / "lbl"] * 2
        split = load_mnist(*paths)
        assert np.all(split.train_images == 1.0)
        np.testing.assert_array_equal(split.train_labels, [3, 4])

    def test_gzip(self, tmp_path):
        rng = np.random.default_rng(0)
        images = rng.integers(0, 256, (5, 28, 28))
        write_idx_images(tmp_path / "img.gz", images, compress=True)
        write_idx_labels(tmp_path / "lbl.gz", [1, 2, 3, 4, 5], compress=True)
        split = load_mnist(tmp_path / "img.gz", tmp_path / "lbl.gz", tmp_path / "img.gz", tmp_path / "lbl.gz")
        np.testing.assert_allclose(split.test_images[:, 0], images / 255.0, rtol=1e-6)

    def test_bad_magic(self, mnist_dir):
        write_idx_images(mnist_dir / "train-images-idx3-ubyte", np.zeros((60, 28, 28)), magic=2049)
        with pytest.raises(DatasetFormatError) as info:
            load_mnist(*mnist_paths(mnist_dir))
        assert info.value.offset == 0
        assert "train-images-idx3-ubyte" in str(info.value)
        assert "(at byte 0)" in str(info.value)

    def test_label_out_of_range(self, mnist_dir):
        labels = np.zeros(60, dtype=np.uint8)
        labels[17] = 10
        write_idx_labels(mnist_dir / "train-labels-idx1-ubyte", labels)
        with pytest.raises(DatasetFormatError) as info:
            load_mnist(*mnist_paths(mnist_dir))
        assert info.value.offset == 8 + 17

    def test_count_mismatch(self, mnist_dir):
        write_idx_labels(mnist_dir / "train-labels-idx1-ubyte", np.zeros(59))
        with pytest.raises(DatasetFormatError):
            load_mnist(*mnist_paths(mnist_dir))

    def test_truncated_payload(self):
        data = (2051).to_bytes(4, "big") + b"".join(d.to_bytes(4, "big") for d in (2, 28, 28)) + bytes(100)
        with pytest.raises(DatasetFormatError):
            parse_idx(data, datasets.IDX_IMAGES_MAGIC, 3)

    def test_too_short(self):
        with pytest.raises(DatasetFormatError):
            parse_idx(b"\x00\x00", datasets.IDX_IMAGES_MAGIC, 3)

    def test_subset_is_deterministic(self, mnist_dir):
        a = load_mnist(*mnist_paths(mnist_dir), subset=10, seed=3)
        b = load_mnist(*mnist_paths(mnist_dir), subset=10, seed=3)
        assert len(a.train_labels) == 10
        assert len(a.test_labels) == 20
        np.testing.assert_array_equal(a.train_images, b.train_images)

    def test_load_dataset_resolves_files(self, mnist_dir):
        split = load_dataset(DatasetConfig(name="mnist", root=str(mnist_dir)))
        assert split.name == "mnist"
        assert len(split.train_labels) == 60

    def test_missing_files(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_dataset(DatasetConfig(name="mnist", root=str(tmp_path)))


class TestCifar:
    def test_load(self, cifar_dir):
        split = load_dataset(DatasetConfig(name="cifar10", root=str(cifar_dir)))
        assert split.train_images.shape == (40, 3, 32, 32)
        assert split.test_images.shape == (6, 3, 32, 32)
        assert split.input_shape == (3, 32, 32)

    def test_channel_layout(self, tmp_path):
        pixels = np.concatenate([np.full(1024, 0), np.full(1024, 51), np.full(1024, 255)])
        write_cifar_batch(tmp_path / "b.bin", pixels[None, :], [7])
        split = load_cifar10([tmp_path / "b.bin"], tmp_path / "b.bin")
        image = split.train_images[0]
        assert np.all(image[0] == 0.0)
        assert np.allclose(image[1], 0.2)
        assert np.all(image[2] == 1.0)
        assert split.train_labels[0] == 7

    def test_truncated_record(self, cifar_dir):
        path = cifar_dir / "data_batch_1.bin"
        path.write_bytes(path.read_bytes()[:-10])
        with pytest.raises(DatasetFormatError) as info:
            load_cifar10([path], cifar_dir / "test_batch.bin")
        assert info.value.offset == 7 * datasets.CIFAR_RECORD_BYTES

    def test_label_offset(self, tmp_path):
        write_cifar_batch(tmp_path / "b.bin", np.zeros((3, 3072)), [1, 2, 12])
        with pytest.raises(DatasetFormatError) as info:
            load_cifar10([tmp_path / "b.bin"], tmp_path / "b.bin")
        assert info.value.offset == 2 * datasets.CIFAR_RECORD_BYTES

    def test_missing_train_batch(self, cifar_dir):
        (cifar_dir / "data_batch_3.bin").unlink()
        with pytest.raises(FileNotFoundError, match="data_batch_3.bin"):
            load_dataset(DatasetConfig(name="cifar10", root=str(cifar_dir)))

    def test_needs_a_batch(self, cifar_dir):
        with pytest.raises(ValidationError):
            load_cifar10([], cifar_dir / "test_batch.bin")


class TestSynthetic:
    def test_shapes_and_range(self):
        split = make_synthetic(num_train=30, num_test=10, size=6, channels=2, seed=1)
        assert split.train_images.shape == (30, 2, 6, 6)
        assert split.test_images.shape == (10, 2, 6, 6)
        assert split.train_images.min() >= 0.0 and split.train_images.max() <= 1.0
        assert set(split.train_labels) <= set(range(10))

    def test_seeded(self):
        a, b = make_synthetic(seed=5), make_synthetic(seed=5)
        np.testing.assert_array_equal(a.train_images, b.train_images)
        assert not np.array_equal(a.train_images, make_synthetic(seed=6).train_images)

    def test_select_subset(self):
        idx = select_subset(100, 10, seed=0)
        assert len(idx) == 10
        assert np.all(np.diff(idx) > 0)
        np.testing.assert_array_equal(select_subset(5, 10, seed=0), np.arange(5))


class TestBatching:
    def setup_method(self):
        self.images = np.arange(50, dtype=np.float32).reshape(50, 1, 1, 1)
        self.labels = np.arange(50)

    def test_covers_every_item_once(self):
        seen = np.concatenate([y for _, y in iterate_batches(self.images, self.labels, 8, seed=0, epoch=0)])
        assert sorted(seen) == list(range(50))

    def test_last_batch_is_partial(self):
        sizes = [len(y) for _, y in iterate_batches(self.images, self.labels, 16, seed=0, epoch=0)]
        assert sizes == [16, 16, 16, 2]

    def test_order_depends_on_seed_and_epoch(self):
        def order(seed, epoch):
            return np.concatenate([y for _, y in iterate_batches(self.images, self.labels, 50, seed, epoch)])

        np.testing.assert_array_equal(order(1, 2), order(1, 2))
        assert not np.array_equal(order(1, 2), order(1, 3))
        assert not np.array_equal(order(1, 2), order(2, 2))

    def test_no_shuffle(self):
        first = next(iter(iterate_batches(self.images, self.labels, 5, 0, 0, shuffle=False)))
        np.testing.assert_array_equal(first[1], [0, 1, 2, 3, 4])

    def test_prefetch_does_not_change_stream(self):
        rng = np.random.default_rng(0)
        images = rng.random((40, 3, 8, 8)).astype(np.float32)
        labels = np.arange(40)
        plain = list(iterate_batches(images, labels, 6, seed=4, epoch=1, augment=True, prefetch=0))
        ahead = list(iterate_batches(images, labels, 6, seed=4, epoch=1, augment=True, prefetch=3))
        assert len(plain) == len(ahead)
        for (xa, ya), (xb, yb) in zip(plain, ahead):
            np.testing.assert_array_equal(xa, xb)
            np.testing.assert_array_equal(ya, yb)

    def test_crop_flip_keeps_shape(self):
        images = np.random.default_rng(1).random((4, 3, 32, 32)).astype(np.float32)
        out = random_crop_flip(images, np.random.default_rng(2))
        assert out.shape == images.shape
        assert out.dtype == images.dtype
