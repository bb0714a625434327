import gzip
import struct

import numpy as np
import pytest

from datasets import (
    CIFAR_RECORD_SIZE,
    LabeledDataset,
    center,
    load_cifar_binary,
    load_mnist,
    make_blobs,
    read_cifar_records,
    read_idx_images,
    read_idx_labels,
    to_grayscale,
)
from errors import CountError, DimensionError, FormatError, TruncationError


def write_idx_images(path, images, magic=0x803):
    n, rows, cols = images.shape
    with open(path, "wb") as f:
        f.write(struct.pack(">IIII", magic, n, rows, cols))
        f.write(images.astype(np.uint8).tobytes())


def write_idx_labels(path, labels, magic=0x801):
    with open(path, "wb") as f:
        f.write(struct.pack(">II", magic, len(labels)))
        f.write(np.asarray(labels, dtype=np.uint8).tobytes())


def cifar_record(label, r, g, b):
    return bytes([label]) + bytes([r]) * 1024 + bytes([g]) * 1024 + bytes([b]) * 1024


@pytest.fixture
def mnist_files(tmp_path):
    images = np.arange(5 * 4 * 4, dtype=np.uint8).reshape(5, 4, 4)
    labels = [0, 1, 2, 3, 9]
    img, lbl = tmp_path / "images-idx3-ubyte", tmp_path / "labels-idx1-ubyte"
    write_idx_images(img, images)
    write_idx_labels(lbl, labels)
    return str(img), str(lbl), images, labels


class TestIdx:

    def test_load(self, mnist_files):
        img, lbl, images, labels = mnist_files
        ds = load_mnist(img, lbl, expected_count=5)
        assert ds.N == 5 and ds.D == 16 and ds.K == 10
        assert ds.image_shape == (4, 4)
        assert np.allclose(ds.X[1], images[1].reshape(-1) / 255.0)
        assert list(ds.y) == labels

    def test_count_mismatch(self, mnist_files):
        img, lbl, _, _ = mnist_files
        with pytest.raises(CountError):
            load_mnist(img, lbl, expected_count=60000)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad"
        write_idx_images(path, np.zeros((1, 2, 2)), magic=0x801)
        with pytest.raises(FormatError):
            read_idx_images(str(path))

    def test_truncated_payload(self, tmp_path):
        path = tmp_path / "short"
        with open(path, "wb") as f:
            f.write(struct.pack(">IIII", 0x803, 3, 2, 2))
            f.write(b"\x00" * 5)
        with pytest.raises(TruncationError):
            read_idx_images(str(path))

    def test_truncated_header(self, tmp_path):
        path = tmp_path / "tiny"
        path.write_bytes(b"\x00\x00")
        with pytest.raises(TruncationError):
            read_idx_labels(str(path))

    def test_gzip(self, tmp_path):
        path = tmp_path / "labels.gz"
        with gzip.open(path, "wb") as f:
            f.write(struct.pack(">II", 0x801, 3) + bytes([4, 5, 6]))
        assert list(read_idx_labels(str(path))) == [4, 5, 6]

    def test_label_count_mismatch(self, tmp_path, mnist_files):
        img, _, _, _ = mnist_files
        lbl = tmp_path / "few-labels"
        write_idx_labels(lbl, [1, 2])
        with pytest.raises(CountError):
            load_mnist(img, str(lbl), expected_count=None)

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            read_idx_images(str(tmp_path / "nope"))


class TestCifar:

    @pytest.fixture
    def batches(self, tmp_path):
        train = tmp_path / "data_batch_1.bin"
        train.write_bytes(cifar_record(0, 255, 0, 0) + cifar_record(3, 1, 2, 3) + cifar_record(6, 0, 255, 0))
        test = tmp_path / "test_batch.bin"
        test.write_bytes(cifar_record(6, 0, 0, 255) + cifar_record(9, 9, 9, 9))
        return str(train), str(test)

    def test_binary_subset(self, batches):
        train, test = load_cifar_binary([batches[0]], batches[1], expected_per_class=None)
        assert train.N == 2 and test.N == 1
        assert list(train.y) == [0, 1] and list(test.y) == [1]
        assert train.D == 1024 and train.K == 2

    def test_grayscale_weights(self, batches):
        train, test = load_cifar_binary([batches[0]], batches[1], expected_per_class=None)
        assert np.allclose(train.X[0], 0.299)
        assert np.allclose(train.X[1], 0.587)
        assert np.allclose(test.X[0], 0.114)

    def test_expected_count(self, batches):
        with pytest.raises(CountError):
            load_cifar_binary([batches[0]], batches[1])

    def test_bad_length(self, tmp_path):
        path = tmp_path / "broken.bin"
        path.write_bytes(b"\x00" * (CIFAR_RECORD_SIZE + 7))
        with pytest.raises(FormatError):
            read_cifar_records(str(path))

    def test_to_grayscale_range(self):
        pixels = np.full((2, 3, 4), 255, dtype=np.uint8)
        assert np.allclose(to_grayscale(pixels), 1.0)


class TestLabeledDataset:

    def test_rejects_out_of_range_pixels(self):
        with pytest.raises(ValueError):
            LabeledDataset(X=np.array([[1.5, 0.0]]), y=np.array([0]), K=2, name="t")

    def test_rejects_bad_labels(self):
        with pytest.raises(ValueError):
            LabeledDataset(X=np.zeros((2, 2)), y=np.array([0, 2]), K=2, name="t")

    def test_head(self):
        ds = LabeledDataset(X=np.zeros((4, 2)), y=np.array([0, 1, 0, 1]), K=2, name="t")
        assert ds.head(2).N == 2
        assert ds.head(None) is ds
        assert ds.head(10).N == 4


class TestCentering:

    def test_train_then_test(self, rng):
        X = rng.uniform(size=(20, 3))
        Xc, info = center(X)
        assert np.allclose(Xc.mean(axis=0), 0.0)
        Yc, same = center(X[:5], info)
        assert same is info
        assert np.allclose(Yc, X[:5] - X.mean(axis=0))

    def test_dimension_mismatch(self, rng):
        _, info = center(rng.uniform(size=(5, 3)))
        with pytest.raises(DimensionError):
            center(rng.uniform(size=(5, 4)), info)


class TestBlobs:

    def test_deterministic(self):
        a, _ = make_blobs(30, 10, side=4, seed=11)
        b, _ = make_blobs(30, 10, side=4, seed=11)
        assert np.array_equal(a.X, b.X)
        assert a.image_shape == (4, 4) and a.name == "blobs"

    def test_balanced_labels(self):
        train, test = make_blobs(30, 9, side=4, classes=3)
        assert np.bincount(train.y).tolist() == [10, 10, 10]
        assert test.N == 9
