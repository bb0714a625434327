"""
Readers for the raw MNIST (IDX) and CIFAR-10 (binary version) files, and the
two evaluation datasets built from them: MNIST and CIFAR-binary
(airplane vs frog, grayscale).

Pixels are scaled to [0, 1] on load; every epsilon in the toolkit is measured
on that scale.
"""

import gzip
import logging
import os
import struct
from typing import List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from errors import CountError, DimensionError, FormatError, ParameterError, TruncationError
from numerics import SeededRng

logger = logging.getLogger(__name__)

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

MNIST_TRAIN_COUNT = 60000
MNIST_TEST_COUNT = 10000
MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}

CIFAR_SIDE = 32
CIFAR_PIXELS = CIFAR_SIDE * CIFAR_SIDE
CIFAR_RECORD_SIZE = 1 + 3 * CIFAR_PIXELS
CIFAR_AIRPLANE = 0
CIFAR_FROG = 6
CIFAR_PER_CLASS = 6000
CIFAR_TRAIN_FILES = [f"data_batch_{i}.bin" for i in range(1, 6)]
CIFAR_TEST_FILE = "test_batch.bin"

# ITU-R BT.601 luma weights
GRAY_WEIGHTS = (0.299, 0.587, 0.114)


class LabeledDataset(BaseModel):
    """Flattened grayscale images in [0, 1] with integer labels 0..K-1."""
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    X: np.ndarray = Field(description="N x D design matrix, pixel intensities in [0, 1]")
    y: np.ndarray = Field(description="Integer labels, length N")
    K: int = Field(description="Number of classes")
    name: str = Field(description="Dataset identifier, e.g. 'mnist' or 'cifar-binary'")
    image_shape: Optional[Tuple[int, int]] = Field(default=None, description="(rows, cols) when rows are images")

    @model_validator(mode="after")
    def _check(self):
        if self.X.ndim != 2 or self.X.shape[0] == 0:
            raise DimensionError(f"{self.name}: X must be a non-empty N x D matrix, got {self.X.shape}")
        if self.y.shape != (self.X.shape[0],):
            raise DimensionError(f"{self.name}: y has shape {self.y.shape}, expected ({self.X.shape[0]},)")
        if self.X.min() < 0.0 or self.X.max() > 1.0:
            raise ParameterError(f"{self.name}: pixel values must lie in [0, 1]")
        if self.y.min() < 0 or self.y.max() >= self.K:
            raise ParameterError(f"{self.name}: labels must lie in 0..{self.K - 1}")
        if self.image_shape is not None and self.image_shape[0] * self.image_shape[1] != self.X.shape[1]:
            raise DimensionError(f"{self.name}: image shape {self.image_shape} does not match D={self.X.shape[1]}")
        return self

    @property
    def N(self) -> int:
        return self.X.shape[0]

    @property
    def D(self) -> int:
        return self.X.shape[1]

    def head(self, limit: Optional[int]) -> "LabeledDataset":
        """First ``limit`` samples (order preserved); the whole set when limit is None."""
        if limit is None or limit >= self.N:
            return self
        if limit < 1:
            raise ParameterError(f"limit must be positive, got {limit}")
        return self.model_copy(update={"X": self.X[:limit], "y": self.y[:limit]})


class CenteringInfo(BaseModel):
    """Training-set column means used to centre inputs."""
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    mean: np.ndarray

    @model_validator(mode="after")
    def _check(self):
        if self.mean.ndim != 1 or not np.all(np.isfinite(self.mean)):
            raise ParameterError("centering mean must be a finite vector")
        return self


def _open_raw(path: str):
    try:
        if path.endswith(".gz"):
            return gzip.open(path, "rb")
        return open(path, "rb")
    except FileNotFoundError:
        raise FileNotFoundError(f"The file {path} was not found.")


def _read_all(path: str) -> bytes:
    with _open_raw(path) as f:
        return f.read()


def read_idx_images(path: str) -> np.ndarray:
    """Reads an IDX image file into an (N, rows, cols) uint8 array."""
    raw = _read_all(path)
    if len(raw) < 16:
        raise TruncationError(f"{path}: IDX image header is truncated ({len(raw)} bytes)")
    magic, count, rows, cols = struct.unpack(">IIII", raw[:16])
    if magic != IDX_IMAGES_MAGIC:
        raise FormatError(f"{path}: bad IDX image magic 0x{magic:08x}")
    expected = count * rows * cols
    payload = raw[16:]
    if len(payload) < expected:
        raise TruncationError(f"{path}: expected {expected} pixel bytes, found {len(payload)}")
    return np.frombuffer(payload, dtype=np.uint8, count=expected).reshape(count, rows, cols)


def read_idx_labels(path: str) -> np.ndarray:
    """Reads an IDX label file into a uint8 vector."""
    raw = _read_all(path)
    if len(raw) < 8:
        raise TruncationError(f"{path}: IDX label header is truncated ({len(raw)} bytes)")
    magic, count = struct.unpack(">II", raw[:8])
    if magic != IDX_LABELS_MAGIC:
        raise FormatError(f"{path}: bad IDX label magic 0x{magic:08x}")
    payload = raw[8:]
    if len(payload) < count:
        raise TruncationError(f"{path}: expected {count} label bytes, found {len(payload)}")
    return np.frombuffer(payload, dtype=np.uint8, count=count)


def load_mnist(image_path: str, label_path: str, expected_count: Optional[int], name: str = "mnist") -> LabeledDataset:
    """
    Loads one MNIST split from its IDX image and label files.

    Args:
        image_path: IDX3 image file (optionally gzipped).
        label_path: IDX1 label file (optionally gzipped).
        expected_count: Number of samples the split must contain; None skips the check.

    Returns:
        A LabeledDataset with images flattened row-major and scaled by 1/255.
    """
    images = read_idx_images(image_path)
    labels = read_idx_labels(label_path)
    if expected_count is not None and images.shape[0] != expected_count:
        raise CountError(f"{image_path}: declares {images.shape[0]} images, expected {expected_count}")
    if labels.shape[0] != images.shape[0]:
        raise CountError(f"{label_path}: {labels.shape[0]} labels for {images.shape[0]} images")

    n, rows, cols = images.shape
    X = images.reshape(n, rows * cols).astype(np.float64) / 255.0
    logger.info("Loaded %d images (%dx%d) from %s", n, rows, cols, image_path)
    return LabeledDataset(X=X, y=labels.astype(np.int64), K=10, name=name, image_shape=(rows, cols))


def _find(directory: str, stem: str) -> str:
    for candidate in (stem, stem + ".gz", stem.replace("-idx", ".idx")):
        path = os.path.join(directory, candidate)
        if os.path.exists(path):
            return path
    raise FileNotFoundError(f"The file {os.path.join(directory, stem)} was not found.")


def load_mnist_dir(mnist_dir: str) -> Tuple[LabeledDataset, LabeledDataset]:
    """Loads the standard 60,000/10,000 MNIST split from a directory."""
    splits = []
    for split, count in (("train", MNIST_TRAIN_COUNT), ("test", MNIST_TEST_COUNT)):
        img_stem, lbl_stem = MNIST_FILES[split]
        splits.append(load_mnist(_find(mnist_dir, img_stem), _find(mnist_dir, lbl_stem), count))
    return splits[0], splits[1]


def read_cifar_records(path: str) -> Tuple[np.ndarray, np.ndarray]:
    """
    Reads a CIFAR-10 binary batch.

    Returns:
        (labels, pixels) where pixels has shape (N, 3, 1024): red, green, blue planes.
    """
    raw = _read_all(path)
    if len(raw) % CIFAR_RECORD_SIZE != 0:
        raise FormatError(f"{path}: length {len(raw)} is not a multiple of {CIFAR_RECORD_SIZE}")
    records = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD_SIZE)
    return records[:, 0].copy(), records[:, 1:].reshape(-1, 3, CIFAR_PIXELS)


def to_grayscale(pixels: np.ndarray) -> np.ndarray:
    """Collapses (N, 3, P) RGB bytes to (N, P) luminance in [0, 1]."""
    r, g, b = (pixels[:, c, :].astype(np.float64) for c in range(3))
    gray = (GRAY_WEIGHTS[0] * r + GRAY_WEIGHTS[1] * g + GRAY_WEIGHTS[2] * b) / 255.0
    return np.clip(gray, 0.0, 1.0)


def _binary_subset(paths: Sequence[str], name: str) -> LabeledDataset:
    labels: List[np.ndarray] = []
    pixels: List[np.ndarray] = []
    for path in paths:
        lbl, pix = read_cifar_records(path)
        keep = (lbl == CIFAR_AIRPLANE) | (lbl == CIFAR_FROG)
        labels.append(lbl[keep])
        pixels.append(pix[keep])
    lbl = np.concatenate(labels)
    pix = np.concatenate(pixels)
    if lbl.size == 0:
        raise CountError(f"{name}: no airplane or frog records found")
    y = (lbl == CIFAR_FROG).astype(np.int64)
    return LabeledDataset(X=to_grayscale(pix), y=y, K=2, name=name, image_shape=(CIFAR_SIDE, CIFAR_SIDE))


def load_cifar_binary(
    batch_paths: Sequence[str],
    test_batch_path: str,
    expected_per_class: Optional[int] = CIFAR_PER_CLASS,
) -> Tuple[LabeledDataset, LabeledDataset]:
    """
    Builds CIFAR-binary: airplane (0) vs frog (1), grayscale, 1024-dimensional.

    The original CIFAR-10 train/test partition is kept, which gives
    10,000 training and 2,000 test images for the official files.

    Args:
        batch_paths: The five training batch files.
        test_batch_path: The test batch file.
        expected_per_class: Airplane and frog totals across both splits; None skips the check.
    """
    train = _binary_subset(batch_paths, "cifar-binary")
    test = _binary_subset([test_batch_path], "cifar-binary")
    if expected_per_class is not None:
        for cls, title in ((0, "airplane"), (1, "frog")):
            total = int(np.sum(train.y == cls) + np.sum(test.y == cls))
            if total != expected_per_class:
                raise CountError(f"cifar-binary: found {total} {title} images, expected {expected_per_class}")
    logger.info("CIFAR-binary: %d train / %d test", train.N, test.N)
    return train, test


def load_cifar_dir(cifar_dir: str) -> Tuple[LabeledDataset, LabeledDataset]:
    """Loads CIFAR-binary from a directory holding the CIFAR-10 binary-version files."""
    batches = [_find(cifar_dir, f) for f in CIFAR_TRAIN_FILES]
    return load_cifar_binary(batches, _find(cifar_dir, CIFAR_TEST_FILE))


def make_blobs(
    n_train: int,
    n_test: int,
    side: int = 8,
    classes: int = 2,
    seed: int = 0,
    spread: float = 0.08,
) -> Tuple[LabeledDataset, LabeledDataset]:
    """
    Small image-shaped Gaussian-blob task for desk-scale runs and tests.

    Each class has a random prototype image in [0.2, 0.8]; samples add isotropic
    noise and are clipped to [0, 1].
    """
    rng = SeededRng(seed)
    D = side * side
    prototypes = rng.generator.uniform(0.2, 0.8, size=(classes, D))

    def draw(n: int) -> LabeledDataset:
        y = np.arange(n) % classes
        X = prototypes[y] + spread * rng.generator.standard_normal((n, D))
        return LabeledDataset(X=np.clip(X, 0.0, 1.0), y=y.astype(np.int64), K=classes,
                              name="blobs", image_shape=(side, side))

    return draw(n_train), draw(n_test)


def center(X: np.ndarray, info: Optional[CenteringInfo] = None) -> Tuple[np.ndarray, CenteringInfo]:
    """
    Subtracts column means.

    Without ``info`` the means are computed from ``X`` (training path); with
    ``info`` the stored means are subtracted (held-out path).
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise DimensionError(f"center expects a 2-D matrix, got shape {X.shape}")
    if info is None:
        info = CenteringInfo(mean=X.mean(axis=0))
    elif info.mean.shape[0] != X.shape[1]:
        raise DimensionError(f"centering mean has length {info.mean.shape[0]}, data has D={X.shape[1]}")
    return X - info.mean, info
