"""Image datasets: a procedural separable toy task, plus a CIFAR-10 loader.

The synthetic task assigns each class a fixed smooth pattern (a coarse
random grid upsampled 4x); samples are the class pattern plus Gaussian
noise. It is deliberately easy so that short finetuning runs produce
above-chance predicted networks. Real CIFAR-10 binary batches can be used
instead when the files are on disk.
"""

from __future__ import annotations

import dataclasses
import os

import numpy as np

from .errors import DatasetError


@dataclasses.dataclass
class Dataset:
    """Normalized images [N, C, H, W] with integer labels."""

    images: np.ndarray
    labels: np.ndarray
    split: str
    num_classes: int
    norm_mean: np.ndarray
    norm_std: np.ndarray

    def __post_init__(self):
        if self.images.ndim != 4:
            raise DatasetError(f"images must be [N,C,H,W], got {self.images.shape}")
        if len(self.labels) != len(self.images):
            raise DatasetError("images and labels disagree in length")
        if len(self.labels) and (self.labels.min() < 0
                                 or self.labels.max() >= self.num_classes):
            raise DatasetError(f"labels outside [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def resolution(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])


def _class_patterns(num_classes, resolution, rng):
    c, h, w = resolution
    ch = -(-h // 4)
    cw = -(-w // 4)
    coarse = rng.normal(size=(num_classes, c, ch, cw))
    up = np.repeat(np.repeat(coarse, 4, axis=2), 4, axis=3)
    return up[:, :, :h, :w].astype(np.float32)


def synthetic_dataset(num_train: int, num_test: int,
                      resolution: tuple[int, int, int] = (3, 32, 32),
                      num_classes: int = 10, seed: int = 0,
                      noise: float = 0.25) -> tuple[Dataset, Dataset]:
    """Generate disjoint train/test splits of the toy task."""
    rng = np.random.default_rng([seed, 0])
    patterns = _class_patterns(num_classes, resolution, rng)

    def make(count, split):
        labels = np.arange(count) % num_classes
        labels = labels[rng.permutation(count)]
        images = patterns[labels] + noise * rng.normal(
            size=(count, *resolution)).astype(np.float32)
        return images.astype(np.float32), labels.astype(np.int64)

    train_x, train_y = make(num_train, "train")
    test_x, test_y = make(num_test, "test")
    mean = train_x.mean(axis=(0, 2, 3), dtype=np.float64).astype(np.float32)
    std = train_x.std(axis=(0, 2, 3), dtype=np.float64).astype(np.float32)
    std = np.maximum(std, 1e-6)

    def normalize(x):
        return (x - mean[None, :, None, None]) / std[None, :, None, None]

    train = Dataset(normalize(train_x), train_y, "train", num_classes, mean, std)
    test = Dataset(normalize(test_x), test_y, "test", num_classes, mean, std)
    return train, test


_CIFAR_TRAIN = [f"data_batch_{i}.bin" for i in range(1, 6)]
_CIFAR_TEST = ["test_batch.bin"]
_CIFAR_RECORD = 3073  # label byte + 3*32*32 pixels


def _read_cifar_files(directory, names):
    images, labels = [], []
    for name in names:
        path = os.path.join(directory, name)
        if not os.path.exists(path):
            continue
        raw = np.fromfile(path, dtype=np.uint8)
        if raw.size % _CIFAR_RECORD:
            raise DatasetError(f"{path}: size is not a multiple of {_CIFAR_RECORD}")
        rec = raw.reshape(-1, _CIFAR_RECORD)
        labels.append(rec[:, 0].astype(np.int64))
        images.append(rec[:, 1:].reshape(-1, 3, 32, 32).astype(np.float32) / 255.0)
    if not images:
        raise DatasetError(f"no CIFAR-10 binary batches found in '{directory}'")
    return np.concatenate(images), np.concatenate(labels)


def load_cifar10(directory: str, num_train: int | None = None,
                 num_test: int | None = None) -> tuple[Dataset, Dataset]:
    """Read CIFAR-10 binary batches when present on disk."""
    train_x, train_y = _read_cifar_files(directory, _CIFAR_TRAIN)
    test_x, test_y = _read_cifar_files(directory, _CIFAR_TEST)
    if num_train:
        train_x, train_y = train_x[:num_train], train_y[:num_train]
    if num_test:
        test_x, test_y = test_x[:num_test], test_y[:num_test]
    mean = train_x.mean(axis=(0, 2, 3), dtype=np.float64).astype(np.float32)
    std = np.maximum(train_x.std(axis=(0, 2, 3), dtype=np.float64), 1e-6).astype(np.float32)

    def normalize(x):
        return ((x - mean[None, :, None, None]) / std[None, :, None, None]).astype(np.float32)

    train = Dataset(normalize(train_x), train_y, "train", 10, mean, std)
    test = Dataset(normalize(test_x), test_y, "test", 10, mean, std)
    return train, test
