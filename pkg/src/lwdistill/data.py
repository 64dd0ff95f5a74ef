"""Synthetic classification tasks and the LWDS1 image-dataset file format.

LWDS1 layout (all little-endian)::

    b"LWDS1"                      5 bytes
    N, C, H, W, num_classes       5 x u32
    pixels                        N*C*H*W x f64, values in [0, 1]
    labels                        N x u16
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

DATASET_MAGIC = b"LWDS1"
_HEADER = struct.Struct("<5I")
TEST_FRACTION = 0.2


@dataclass(frozen=True)
class Dataset:
    inputs: np.ndarray
    labels: np.ndarray
    train_idx: np.ndarray
    test_idx: np.ndarray
    num_classes: int
    name: str = ""
    seed: int = 0

    def __post_init__(self):
        if len(self.inputs) != len(self.labels):
            raise ValueError(f"{len(self.inputs)} inputs but {len(self.labels)} labels")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")
        both = np.concatenate([self.train_idx, self.test_idx])
        if np.unique(both).size != both.size or both.size != len(self.labels):
            raise ValueError("train/test split must partition the sample indices")

    @property
    def sample_shape(self) -> tuple[int, ...]:
        return tuple(self.inputs.shape[1:])

    def train(self) -> tuple[np.ndarray, np.ndarray]:
        return self.inputs[self.train_idx], self.labels[self.train_idx]

    def test(self) -> tuple[np.ndarray, np.ndarray]:
        return self.inputs[self.test_idx], self.labels[self.test_idx]


def split_indices(n: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Seeded 80/20 partition of ``range(n)``."""
    perm = np.random.default_rng([seed, 1]).permutation(n)
    n_test = int(round(n * TEST_FRACTION))
    return np.sort(perm[n_test:]), np.sort(perm[:n_test])


def spiral_arm(t, arm: int, num_classes: int, turns: float) -> np.ndarray:
    """Noise-free point at parameter ``t`` in [0, 1] on spiral ``arm``."""
    t = np.asarray(t, dtype=np.float64)
    angle = 2.0 * np.pi * (arm / num_classes + turns * t)
    return np.stack([t * np.cos(angle), t * np.sin(angle)], axis=-1)


def generate_spirals(
    n_per_class: int,
    num_classes: int,
    noise_sigma: float,
    seed: int,
    turns: float = 1.0,
) -> Dataset:
    if n_per_class < 2 or num_classes < 2:
        raise ValueError("spirals need n_per_class >= 2 and num_classes >= 2")
    if noise_sigma < 0:
        raise ValueError(f"noise_sigma must be non-negative, got {noise_sigma}")
    rng = np.random.default_rng(seed)
    xs, ys = [], []
    for k in range(num_classes):
        t = rng.uniform(0.0, 1.0, size=n_per_class)
        pts = spiral_arm(t, k, num_classes, turns)
        pts = pts + noise_sigma * rng.standard_normal(pts.shape)
        xs.append(pts)
        ys.append(np.full(n_per_class, k))
    x = np.concatenate(xs)
    y = np.concatenate(ys).astype(np.int64)
    train, test = split_indices(len(y), seed)
    return Dataset(x, y, train, test, num_classes, "spirals", seed)


def generate_blobs(
    n_per_class: int,
    num_classes: int,
    dim: int,
    separation: float,
    seed: int,
) -> Dataset:
    """Isotropic unit-variance Gaussian clusters around centres drawn at scale ``separation``."""
    if n_per_class < 2 or num_classes < 2 or dim < 1:
        raise ValueError("blobs need n_per_class >= 2, num_classes >= 2 and dim >= 1")
    if separation < 0:
        raise ValueError(f"separation must be non-negative, got {separation}")
    rng = np.random.default_rng(seed)
    centres = separation * rng.standard_normal((num_classes, dim))
    x = np.concatenate([c + rng.standard_normal((n_per_class, dim)) for c in centres])
    y = np.repeat(np.arange(num_classes), n_per_class).astype(np.int64)
    train, test = split_indices(len(y), seed)
    return Dataset(x, y, train, test, num_classes, "blobs", seed)


def write_image_dataset(path, images: np.ndarray, labels: np.ndarray, num_classes: int) -> None:
    images = np.asarray(images, dtype=np.float64)
    labels = np.asarray(labels)
    if images.ndim != 4:
        raise ValueError(f"images must be N x C x H x W, got {images.shape}")
    n, c, h, w = images.shape
    with open(path, "wb") as fh:
        fh.write(DATASET_MAGIC)
        fh.write(_HEADER.pack(n, c, h, w, num_classes))
        fh.write(np.ascontiguousarray(images, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(labels, dtype="<u2").tobytes())


def load_image_dataset(path, seed: int = 0) -> Dataset:
    raw = Path(path).read_bytes()
    if raw[:5] != DATASET_MAGIC:
        raise ValueError(f"{path}: bad magic at byte 0, expected {DATASET_MAGIC!r}")
    if len(raw) < 5 + _HEADER.size:
        raise ValueError(f"{path}: truncated header at byte {len(raw)}")
    n, c, h, w, k = _HEADER.unpack_from(raw, 5)
    if n == 0:
        raise ValueError(f"{path}: empty dataset (N=0 at byte 5)")
    offset = 5 + _HEADER.size
    count = n * c * h * w
    if len(raw) < offset + 8 * count:
        raise ValueError(f"{path}: truncated pixel block at byte {len(raw)}, expected {offset + 8 * count}")
    pixels = np.frombuffer(raw, dtype="<f8", count=count, offset=offset).astype(np.float64)
    bad = np.flatnonzero(~((pixels >= 0.0) & (pixels <= 1.0)))
    if bad.size:
        raise ValueError(f"{path}: pixel outside [0, 1] at byte {offset + 8 * bad[0]}")
    offset += 8 * count
    if len(raw) < offset + 2 * n:
        raise ValueError(f"{path}: truncated label block at byte {len(raw)}, expected {offset + 2 * n}")
    labels = np.frombuffer(raw, dtype="<u2", count=n, offset=offset).astype(np.int64)
    bad = np.flatnonzero(labels >= k)
    if bad.size:
        raise ValueError(f"{path}: label {labels[bad[0]]} out of range at byte {offset + 2 * bad[0]}")
    if len(raw) != offset + 2 * n:
        raise ValueError(f"{path}: trailing bytes at byte {offset + 2 * n}")
    train, test = split_indices(n, seed)
    return Dataset(pixels.reshape(n, c, h, w), labels, train, test, k, Path(path).stem, seed)
