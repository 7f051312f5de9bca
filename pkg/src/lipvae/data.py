"""Dataset containers and ingestion: MNIST IDX files, block downsampling, synthetic blobs."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .numerics import DTYPE, SeededRng

IDX_IMAGE_MAGIC = 2051
IDX_LABEL_MAGIC = 2049
PROVENANCE = ("mnist", "fashion-mnist", "synthetic", "downsampled")


class IdxFormatError(ValueError):
    pass


class IdxMagicError(IdxFormatError):
    pass


class IdxTruncatedError(IdxFormatError):
    pass


class IdxDimensionError(IdxFormatError):
    pass


@dataclass
class Dataset:
    images: np.ndarray  # (n, rows * cols), values in [0, 1]
    image_shape: tuple
    provenance: str
    labels: Optional[np.ndarray] = None

    def __post_init__(self):
        self.images = np.ascontiguousarray(self.images, dtype=DTYPE)
        if self.images.ndim != 2 or self.images.shape[0] < 1:
            raise ValueError("dataset needs a non-empty (n, d) image matrix")
        rows, cols = self.image_shape
        if rows * cols != self.images.shape[1]:
            raise ValueError(f"image shape {self.image_shape} does not match width {self.images.shape[1]}")
        if np.any(self.images < 0) or np.any(self.images > 1):
            raise ValueError("pixel values must lie in [0, 1]")
        if self.provenance not in PROVENANCE:
            raise ValueError(f"unknown provenance {self.provenance!r}")
        if self.labels is not None and len(self.labels) != len(self.images):
            raise ValueError("labels and images differ in length")

    def __len__(self):
        return self.images.shape[0]

    @property
    def dim(self) -> int:
        return self.images.shape[1]

    def subset(self, index) -> "Dataset":
        labels = None if self.labels is None else self.labels[index]
        return Dataset(self.images[index], self.image_shape, self.provenance, labels)


def _read_idx(path, magic: int, ndim: int) -> tuple[tuple, bytes]:
    raw = Path(path).read_bytes()
    header_len = 4 + 4 * ndim
    if len(raw) < 4:
        raise IdxTruncatedError(f"{path}: file too short for an IDX header")
    (found,) = struct.unpack(">i", raw[:4])
    if found != magic:
        raise IdxMagicError(f"{path}: magic number {found}, expected {magic}")
    if len(raw) < header_len:
        raise IdxTruncatedError(f"{path}: header truncated")
    dims = struct.unpack(">" + "i" * ndim, raw[4:header_len])
    payload = raw[header_len:]
    expected = math.prod(dims)
    if len(payload) != expected:
        raise IdxTruncatedError(
            f"{path}: header announces {expected} bytes of data, file holds {len(payload)}")
    return dims, payload


def load_mnist_idx(images_path, labels_path=None, provenance: str = "mnist") -> Dataset:
    """Parse big-endian IDX image (and optional label) files; pixels scaled to [0, 1]."""
    (n, rows, cols), payload = _read_idx(images_path, IDX_IMAGE_MAGIC, 3)
    pixels = np.frombuffer(payload, dtype=np.uint8).reshape(n, rows * cols)
    labels = None
    if labels_path is not None:
        (n_labels,), label_bytes = _read_idx(labels_path, IDX_LABEL_MAGIC, 1)
        if n_labels != n:
            raise IdxDimensionError(f"{n} images but {n_labels} labels")
        labels = np.frombuffer(label_bytes, dtype=np.uint8).astype(np.int64)
    return Dataset(pixels.astype(DTYPE) / 255.0, (rows, cols), provenance, labels)


def write_idx_images(path, images: np.ndarray):
    """Write a uint8 array of shape (n, rows, cols) as an IDX image file."""
    images = np.asarray(images, dtype=np.uint8)
    n, rows, cols = images.shape
    Path(path).write_bytes(struct.pack(">iiii", IDX_IMAGE_MAGIC, n, rows, cols) + images.tobytes())


def write_idx_labels(path, labels):
    labels = np.asarray(labels, dtype=np.uint8)
    Path(path).write_bytes(struct.pack(">ii", IDX_LABEL_MAGIC, len(labels)) + labels.tobytes())


def downsample(ds: Dataset, factor: int) -> Dataset:
    """Block-mean pooling of square images by an integer factor."""
    rows, cols = ds.image_shape
    if rows != cols:
        raise ValueError("downsampling needs square images")
    if factor < 1 or rows % factor:
        raise ValueError(f"side {rows} is not divisible by factor {factor}")
    side = rows // factor
    blocks = ds.images.reshape(len(ds), side, factor, side, factor)
    pooled = blocks.mean(axis=(2, 4)).reshape(len(ds), side * side)
    return Dataset(np.clip(pooled, 0.0, 1.0), (side, side), "downsampled", ds.labels)


def blob_profile(side: int, center, width: float, jitter: float = 0.0) -> np.ndarray:
    """Expected image of a unit Gaussian bump whose center is jittered isotropically."""
    ii, jj = np.mgrid[0:side, 0:side].astype(DTYPE)
    var = width**2 + jitter**2
    d2 = (ii - center[0]) ** 2 + (jj - center[1]) ** 2
    return (width**2 / var) * np.exp(-d2 / (2.0 * var))


def synthetic_blobs(n: int, d_x: int, seed: int, k: int = 3, width: float = None,
                    jitter: float = None, amplitude=(0.7, 1.0), noise: float = 0.02,
                    centers=None) -> Dataset:
    """Images of Gaussian bumps drawn from ``k`` component centers.

    Each image picks a component, jitters its center by ``N(0, jitter^2)`` per
    axis, scales the bump by a uniform amplitude, adds pixel noise and clips to
    [0, 1]. Non-square ``d_x`` gives a one-row strip. Component centers are
    drawn from the middle half of the image unless given as a ``(k, 2)`` array.
    """
    if n < 1 or d_x < 1 or k < 1:
        raise ValueError("n, d_x and k must be >= 1")
    side = math.isqrt(d_x)
    shape = (side, side) if side * side == d_x else (1, d_x)
    rows, cols = shape
    width = 0.15 * max(shape) if width is None else width
    jitter = 0.1 * max(shape) if jitter is None else jitter
    rng = SeededRng(seed)
    drawn = np.stack([rng.uniform(0.25, 0.75, k) * (rows - 1),
                      rng.uniform(0.25, 0.75, k) * (cols - 1)], axis=1)
    centers = drawn if centers is None else np.asarray(centers, dtype=DTYPE).reshape(k, 2)
    comp = rng.integers(0, k, n)
    c = centers[comp] + jitter * rng.normal((n, 2))
    amp = rng.uniform(amplitude[0], amplitude[1], n)
    ii, jj = np.mgrid[0:rows, 0:cols].astype(DTYPE)
    d2 = (ii[None] - c[:, 0, None, None]) ** 2 + (jj[None] - c[:, 1, None, None]) ** 2
    img = amp[:, None, None] * np.exp(-d2 / (2.0 * width**2))
    img = img + noise * rng.normal(img.shape)
    return Dataset(np.clip(img, 0.0, 1.0).reshape(n, d_x), shape, "synthetic", comp.astype(np.int64))
