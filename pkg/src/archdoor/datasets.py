"""Labeled image datasets: IDX (MNIST family), CIFAR-10 binary, synthetic.

Every loader returns images of shape (N, 3, H, W), float64, in [-1, 1].

License
-------
This file is part of ArchDoor
BSD 3-Clause License
Copyright (c) 2024, ArchDoor authors
"""

import gzip
import logging
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence, Union

import numpy as np

from archdoor.errors import ConfigError, DatasetFormatError

logger = logging.getLogger(__name__)

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801
CIFAR_RECORD_BYTES = 1 + 3 * 32 * 32
CIFAR_CLASSES = 10
# Test splits of synthetic data are drawn from a shifted seed.
SYNTHETIC_TEST_OFFSET = 1_000_003


@dataclass
class Dataset:
    """Images with class labels.

    Attributes
    ----------
    images : np.ndarray
        (N, C, H, W) float64 in [-1, 1].
    labels : np.ndarray
        (N,) int64 class indices.
    num_classes : int
    split : str
        "train" or "test".
    name : str
    """

    images: np.ndarray
    labels: np.ndarray
    num_classes: int
    split: str = "train"
    name: str = "dataset"

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise DatasetFormatError(f"images must be (N, C, H, W), got {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise DatasetFormatError(
                f"{len(self.images)} images but {len(self.labels)} labels"
            )
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DatasetFormatError(f"labels must lie in 0..{self.num_classes - 1}")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def image_shape(self) -> tuple:
        return tuple(self.images.shape[1:])

    def subset(self, indices: Sequence[int]) -> "Dataset":
        indices = np.asarray(indices, dtype=np.int64)
        return Dataset(
            self.images[indices], self.labels[indices], self.num_classes, self.split, self.name
        )

    def head(self, limit: Union[int, None]) -> "Dataset":
        if limit is None or limit >= len(self):
            return self
        return self.subset(np.arange(limit))


def _to_unit_range(pixels: np.ndarray) -> np.ndarray:
    return pixels.astype(np.float64) / 127.5 - 1.0


# = IDX =================================================================================
def _read_bytes(path: Union[str, Path]) -> bytes:
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as stream:
        return stream.read()


def _idx_header(data: bytes, magic: int, ndim: int, path) -> tuple:
    header_size = 4 * (1 + ndim)
    if len(data) < header_size:
        raise DatasetFormatError(f"{path}: truncated header")
    found, *dims = struct.unpack(f">I{ndim}I", data[:header_size])
    if found != magic:
        raise DatasetFormatError(f"{path}: bad magic 0x{found:08x}, expected 0x{magic:08x}")
    expected = header_size + math.prod(dims)
    if len(data) < expected:
        raise DatasetFormatError(
            f"{path}: truncated, {len(data)} bytes for {expected} expected"
        )
    return tuple(dims), header_size


def load_idx(
    images_path: Union[str, Path],
    labels_path: Union[str, Path],
    num_classes: int = 10,
    pad_to: Union[int, None] = None,
    limit: Union[int, None] = None,
    split: str = "train",
) -> Dataset:
    """Read an IDX image/label pair (optionally gzipped).

    Grayscale pixels become x / 127.5 - 1 replicated over 3 channels.
    `pad_to` pads each image symmetrically with the background value -1.0.

    Raises
    ------
    DatasetFormatError
        Bad magic number, truncated file, or image/label count mismatch.
    """
    image_data = _read_bytes(images_path)
    label_data = _read_bytes(labels_path)
    (count, rows, cols), image_offset = _idx_header(image_data, IDX_IMAGE_MAGIC, 3, images_path)
    (label_count,), label_offset = _idx_header(label_data, IDX_LABEL_MAGIC, 1, labels_path)
    if count != label_count:
        raise DatasetFormatError(f"{count} images but {label_count} labels")

    pixels = np.frombuffer(
        image_data, dtype=np.uint8, count=count * rows * cols, offset=image_offset
    ).reshape(count, 1, rows, cols)
    labels = np.frombuffer(label_data, dtype=np.uint8, count=count, offset=label_offset)
    if limit is not None:
        pixels, labels = pixels[:limit], labels[:limit]

    images = np.repeat(_to_unit_range(pixels), 3, axis=1)
    if pad_to is not None:
        images = pad_images(images, pad_to)
    logger.debug("Loaded %d IDX images of shape %s", len(images), images.shape[1:])
    return Dataset(images, labels, num_classes, split, Path(images_path).stem)


def pad_images(images: np.ndarray, size: int, value: float = -1.0) -> np.ndarray:
    height, width = images.shape[2:]
    if size < height or size < width:
        raise ValueError(f"cannot pad {height}x{width} images to {size}")
    top, left = (size - height) // 2, (size - width) // 2
    return np.pad(
        images,
        ((0, 0), (0, 0), (top, size - height - top), (left, size - width - left)),
        constant_values=value,
    )


# = CIFAR-10 ============================================================================
def load_cifar_binary(
    paths: Sequence[Union[str, Path]],
    limit: Union[int, None] = None,
    split: str = "train",
) -> Dataset:
    """Read CIFAR-10 binary batches: 1 label byte + 3072 channel-major pixel bytes."""
    images, labels = [], []
    for path in paths:
        data = _read_bytes(path)
        if len(data) == 0 or len(data) % CIFAR_RECORD_BYTES:
            raise DatasetFormatError(
                f"{path}: record-length mismatch, {len(data)} bytes is not a multiple "
                f"of {CIFAR_RECORD_BYTES}"
            )
        records = np.frombuffer(data, dtype=np.uint8).reshape(-1, CIFAR_RECORD_BYTES)
        labels.append(records[:, 0])
        images.append(records[:, 1:].reshape(-1, 3, 32, 32))
    if not images:
        raise DatasetFormatError("no CIFAR-10 batch files given")
    pixels = np.concatenate(images)
    label_array = np.concatenate(labels)
    if limit is not None:
        pixels, label_array = pixels[:limit], label_array[:limit]
    if label_array.size and label_array.max() >= CIFAR_CLASSES:
        raise DatasetFormatError(f"label byte {label_array.max()} outside 0..9")
    return Dataset(_to_unit_range(pixels), label_array, CIFAR_CLASSES, split, "cifar10")


# = SYNTHETIC ===========================================================================
def _class_color(label: int, num_classes: int, amplitude: float) -> np.ndarray:
    phase = 2.0 * np.pi * label / num_classes
    return amplitude * np.cos(phase + 2.0 * np.pi * np.arange(3) / 3.0)


def _shape_mask(shape_id: int, extent: int) -> np.ndarray:
    yy, xx = np.mgrid[0:extent, 0:extent]
    centre = (extent - 1) / 2.0
    if shape_id == 0:
        return np.ones((extent, extent), dtype=bool)
    if shape_id == 1:
        return (yy - centre) ** 2 + (xx - centre) ** 2 <= (extent / 2.0) ** 2
    if shape_id == 2:
        band = max(1, extent // 4)
        return (np.abs(yy - centre) < band) | (np.abs(xx - centre) < band)
    return np.abs(yy - xx) <= max(1, extent // 5)


def make_synthetic(
    num_classes: int,
    n: int,
    seed: int,
    image_size: int = 32,
    split: str = "train",
    amplitude: float = 0.6,
    noise: float = 0.05,
) -> Dataset:
    """Class-conditional colored shapes on a gray background.

    Each class has its own color and one of four shapes (square, disk, cross,
    diagonal band) drawn at a random position and size. Labels are balanced
    to within one example. Pixel magnitudes stay at or below `amplitude` plus
    noise so clean images never saturate to +-1.
    """
    if num_classes < 2 or n < 1:
        raise ValueError("make_synthetic needs num_classes >= 2 and n >= 1")
    rng = np.random.default_rng(seed)
    labels = rng.permutation(np.arange(n) % num_classes)
    images = rng.normal(0.0, noise, size=(n, 3, image_size, image_size))
    for index, label in enumerate(labels):
        extent = int(rng.integers(image_size // 4, image_size // 2 + 1))
        top, left = rng.integers(0, image_size - extent + 1, size=2)
        mask = _shape_mask(int(label) % 4, extent)
        color = _class_color(int(label), num_classes, amplitude)
        region = images[index, :, top : top + extent, left : left + extent]
        region[:, mask] += color[:, None]
    np.clip(images, -1.0, 1.0, out=images)
    return Dataset(images, labels, num_classes, split, f"synthetic-{num_classes}")


# = DATASET SPECS =======================================================================
@dataclass
class DatasetSpec:
    """Where a dataset comes from.

    `kind` is "synthetic", "idx" or "cifar". IDX needs `train_images`,
    `train_labels`, `test_images`, `test_labels`; CIFAR needs `train_files`
    and `test_files`.
    """

    kind: str = "synthetic"
    num_classes: int = 4
    n_train: int = 512
    n_test: int = 256
    seed: int = 0
    image_size: int = 32
    pad_to: Union[int, None] = None
    limit: Union[int, None] = None
    paths: dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, data: dict) -> "DatasetSpec":
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown dataset fields {sorted(unknown)}")
        spec = cls(**data)
        if spec.kind not in ("synthetic", "idx", "cifar"):
            raise ConfigError(f"unknown dataset kind '{spec.kind}'")
        return spec

    def to_dict(self) -> dict:
        return asdict(self)

    @property
    def dataset_id(self) -> str:
        if self.kind == "synthetic":
            return f"synthetic-{self.num_classes}-s{self.seed}"
        return f"{self.kind}:{Path(next(iter(self.paths.values()), '')).parent}"


def _path(spec: DatasetSpec, key: str):
    try:
        return spec.paths[key]
    except KeyError:
        raise ConfigError(f"{spec.kind} dataset needs path '{key}'") from None


def load_dataset(spec: DatasetSpec, split: str = "train") -> Dataset:
    """Load the `split` ("train" or "test") described by `spec`."""
    if spec.kind == "synthetic":
        n = spec.n_train if split == "train" else spec.n_test
        seed = spec.seed if split == "train" else spec.seed + SYNTHETIC_TEST_OFFSET
        return make_synthetic(spec.num_classes, n, seed, spec.image_size, split)
    if spec.kind == "idx":
        return load_idx(
            _path(spec, f"{split}_images"),
            _path(spec, f"{split}_labels"),
            num_classes=spec.num_classes,
            pad_to=spec.pad_to,
            limit=spec.limit,
            split=split,
        )
    files = _path(spec, f"{split}_files")
    if isinstance(files, (str, Path)):
        files = [files]
    return load_cifar_binary(files, limit=spec.limit, split=split)
