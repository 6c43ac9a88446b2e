"""Dataset ingestion and augmentation.

Two sources: the CIFAR-10 binary batch format, and a synthetic
oriented-texture generator whose classes differ only by grating
orientation, i.e. they are separable by matched oriented filters
by construction.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, FormatError

CIFAR_RECORD_BYTES = 3073  # 1 label byte + 3 * 32 * 32 pixel bytes
CIFAR_MEAN = (0.4914, 0.4822, 0.4465)
CIFAR_STD = (0.2470, 0.2435, 0.2616)

TRAIN_FILES = [f"data_batch_{i}" for i in range(1, 6)]
TEST_FILES = ["test_batch"]


@dataclass
class Dataset:
    images: np.ndarray  # (N, 3, H, W) float32
    labels: np.ndarray  # (N,) int64
    split: str
    num_classes: int
    augment_crop: bool = False
    augment_flip: bool = False
    crop_pad: int = 4

    def __post_init__(self):
        if self.images.ndim != 4:
            raise DimensionError(f"images must be N x C x H x W, got {self.images.shape}")
        if self.labels.shape != (self.images.shape[0],):
            raise DimensionError("labels length does not match image count")
        if self.images.shape[0] and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise FormatError("labels outside [0, num_classes)")

    @property
    def n(self) -> int:
        return self.images.shape[0]


def batch_bounds(n: int, batch_size: int) -> list[tuple[int, int]]:
    """Fixed-order batch index ranges; the final batch may be partial."""
    if batch_size < 1:
        raise DimensionError(f"batch size must be >= 1, got {batch_size}")
    return [(s, min(s + batch_size, n)) for s in range(0, n, batch_size)]


def _read_cifar_file(path: str) -> tuple[np.ndarray, np.ndarray]:
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) == 0 or len(raw) % CIFAR_RECORD_BYTES != 0:
        raise FormatError(
            f"{path}: size {len(raw)} is not a positive multiple of {CIFAR_RECORD_BYTES}"
        )
    rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD_BYTES)
    labels = rec[:, 0].astype(np.int64)
    if labels.max() > 9:
        raise FormatError(f"{path}: label byte {labels.max()} exceeds 9")
    images = rec[:, 1:].reshape(-1, 3, 32, 32)
    return images, labels


def load_cifar10(
    directory: str,
    mean: tuple = CIFAR_MEAN,
    std: tuple = CIFAR_STD,
) -> tuple[Dataset, Dataset]:
    """Parse the standard binary batches into normalized train/test datasets.

    Accepts the batch files directly in `directory` or under the usual
    cifar-10-batches-bin subdirectory, with or without a .bin suffix.
    Either the whole directory parses or a FormatError is raised; no
    partial datasets.
    """
    root = directory
    sub = os.path.join(directory, "cifar-10-batches-bin")
    if not _find_file(root, TRAIN_FILES[0]) and os.path.isdir(sub):
        root = sub

    def load_files(names: list[str]) -> tuple[np.ndarray, np.ndarray]:
        imgs, labs = [], []
        for name in names:
            path = _find_file(root, name)
            if path is None:
                raise FormatError(f"missing CIFAR-10 batch file {name} under {root}")
            i, l = _read_cifar_file(path)
            imgs.append(i)
            labs.append(l)
        return np.concatenate(imgs), np.concatenate(labs)

    m = np.asarray(mean, dtype=np.float32).reshape(3, 1, 1)
    s = np.asarray(std, dtype=np.float32).reshape(3, 1, 1)

    def normalize(raw: np.ndarray) -> np.ndarray:
        return ((raw.astype(np.float32) / 255.0) - m) / s

    train_raw, train_labels = load_files(TRAIN_FILES)
    test_raw, test_labels = load_files(TEST_FILES)
    train = Dataset(
        normalize(train_raw), train_labels, "train", 10,
        augment_crop=True, augment_flip=True,
    )
    test = Dataset(normalize(test_raw), test_labels, "test", 10)
    return train, test


def _find_file(root: str, name: str) -> str | None:
    for candidate in (os.path.join(root, name), os.path.join(root, name + ".bin")):
        if os.path.isfile(candidate):
            return candidate
    return None


def synth_textures(
    seed: int,
    n_per_class: int,
    num_classes: int = 4,
    image_size: int = 32,
    noise: float = 0.25,
    base_freq: float = 0.18,
    freq_jitter: float = 0.10,
    split: str = "train",
) -> Dataset:
    """Sinusoidal-grating classes at orientations c*pi/num_classes.

    Per sample: uniform random phase, +-freq_jitter relative frequency
    jitter, and i.i.d. Gaussian pixel noise per channel on top of a
    grayscale grating replicated to 3 channels.  Deterministic per seed.
    """
    if not 1 <= num_classes <= 8:
        raise DimensionError(f"num_classes must be in [1, 8], got {num_classes}")
    if image_size < 16:
        raise DimensionError(f"image_size must be >= 16, got {image_size}")
    rng = np.random.default_rng(seed)
    n = n_per_class * num_classes
    xs = np.arange(image_size, dtype=np.float64)
    gx, gy = np.meshgrid(xs, xs, indexing="ij")

    images = np.empty((n, 3, image_size, image_size), dtype=np.float32)
    labels = np.empty(n, dtype=np.int64)
    i = 0
    for c in range(num_classes):
        phi = c * np.pi / num_classes
        direction = gx * np.cos(phi) + gy * np.sin(phi)
        for _ in range(n_per_class):
            freq = base_freq * (1.0 + rng.uniform(-freq_jitter, freq_jitter))
            phase = rng.uniform(0.0, 2.0 * np.pi)
            grating = np.cos(2.0 * np.pi * freq * direction + phase)
            img = np.repeat(grating[None], 3, axis=0)
            if noise > 0:
                img = img + rng.normal(0.0, noise, size=img.shape)
            images[i] = img.astype(np.float32)
            labels[i] = c
            i += 1
    return Dataset(images, labels, split, num_classes)


def augment(image: np.ndarray, rng: np.random.Generator, pad: int = 4, flip: bool = True) -> np.ndarray:
    """Pad-then-random-crop plus random horizontal flip for one (C, H, W) image."""
    c, h, w = image.shape
    dy, dx = (int(v) for v in rng.integers(0, 2 * pad + 1, size=2))
    padded = np.pad(image, ((0, 0), (pad, pad), (pad, pad)))
    out = padded[:, dy : dy + h, dx : dx + w]
    if flip and rng.random() < 0.5:
        out = out[:, :, ::-1]
    return np.ascontiguousarray(out)


def augment_batch(images: np.ndarray, rng: np.random.Generator, crop: bool, flip: bool, pad: int = 4) -> np.ndarray:
    """Vectorized batch augmentation; draws offsets then flips from `rng`."""
    n, c, h, w = images.shape
    out = images
    if crop:
        offs = rng.integers(0, 2 * pad + 1, size=(n, 2))
        padded = np.pad(images, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
        out = np.empty_like(images)
        for i in range(n):
            dy, dx = offs[i]
            out[i] = padded[i, :, dy : dy + h, dx : dx + w]
    if flip:
        do = rng.random(n) < 0.5
        out = out.copy() if out is images else out
        out[do] = out[do, :, :, ::-1]
    return out
