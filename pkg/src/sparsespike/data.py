"""Dataset ingestion: IDX file pairs, raw float32 containers, builtin synthetics.

All loaders normalize pixel values into [0, 1] and return int64 labels.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .tensor import Array, Rng

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass
class Dataset:
    x: Array  # float32 in [0,1], [N,C,H,W] or [N,D]
    y: Array  # int64 in [0, classes)
    classes: int

    def __post_init__(self):
        if self.x.shape[0] != self.y.shape[0]:
            raise ValueError("x/y length mismatch")
        if self.x.size and (self.x.min() < 0 or self.x.max() > 1):
            raise ValueError("pixel values must lie in [0,1]")
        if self.y.size and (self.y.min() < 0 or self.y.max() >= self.classes):
            raise ValueError("labels out of range")

    def __len__(self):
        return self.x.shape[0]

    def subset(self, idx) -> "Dataset":
        return Dataset(self.x[idx], self.y[idx], self.classes)


def load_idx_images(path) -> Array:
    raw = Path(path).read_bytes()
    magic, n, rows, cols = struct.unpack(">IIII", raw[:16])
    if magic != IDX_IMAGES_MAGIC:
        raise ValueError(f"bad IDX image magic 0x{magic:08x}")
    pixels = np.frombuffer(raw, dtype=np.uint8, offset=16)
    if pixels.size != n * rows * cols:
        raise ValueError("IDX image payload truncated")
    return (pixels.reshape(n, 1, rows, cols).astype(np.float32)) / 255.0


def load_idx_labels(path) -> Array:
    raw = Path(path).read_bytes()
    magic, n = struct.unpack(">II", raw[:8])
    if magic != IDX_LABELS_MAGIC:
        raise ValueError(f"bad IDX label magic 0x{magic:08x}")
    labels = np.frombuffer(raw, dtype=np.uint8, offset=8)
    if labels.size != n:
        raise ValueError("IDX label payload truncated")
    return labels.astype(np.int64)


def load_idx_pair(images_path, labels_path, classes: int | None = None) -> Dataset:
    x = load_idx_images(images_path)
    y = load_idx_labels(labels_path)
    return Dataset(x, y, classes if classes is not None else int(y.max()) + 1)


def save_idx_pair(images_path, labels_path, x: Array, y: Array):
    """Write a dataset back out in IDX form (uint8 pixels)."""
    n, _, rows, cols = x.shape
    img = (np.clip(x, 0, 1) * 255.0).round().astype(np.uint8)
    with open(images_path, "wb") as f:
        f.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, rows, cols))
        f.write(img.tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">II", IDX_LABELS_MAGIC, n))
        f.write(y.astype(np.uint8).tobytes())


def load_raw_container(manifest_path) -> Dataset:
    """JSON manifest next to little-endian float32 data and int64 label blobs.

    Manifest keys: shape (list, leading N), data (relative file), labels
    (relative file), classes (int).
    """
    manifest_path = Path(manifest_path)
    manifest = json.loads(manifest_path.read_text())
    shape = tuple(manifest["shape"])
    data = np.fromfile(manifest_path.parent / manifest["data"], dtype="<f4")
    if data.size != int(np.prod(shape)):
        raise ValueError("raw container data length does not match shape")
    labels = np.fromfile(manifest_path.parent / manifest["labels"], dtype="<i8")
    return Dataset(data.reshape(shape).copy(), labels.copy(), int(manifest["classes"]))


def save_raw_container(manifest_path, x: Array, y: Array, classes: int):
    manifest_path = Path(manifest_path)
    data_name = manifest_path.stem + ".f32"
    labels_name = manifest_path.stem + ".i64"
    x.astype("<f4").tofile(manifest_path.parent / data_name)
    y.astype("<i8").tofile(manifest_path.parent / labels_name)
    manifest_path.write_text(
        json.dumps(
            {
                "shape": list(x.shape),
                "data": data_name,
                "labels": labels_name,
                "classes": classes,
            },
            sort_keys=True,
        )
    )


def make_blobs(seed: int, n: int, classes: int, dim: int = 8, spread: float = 0.08) -> Dataset:
    """Gaussian class blobs on the unit box; near-linearly separable."""
    rng = Rng(seed).spawn("blobs")
    centers = rng.uniform(0.25, 0.75, (classes, dim))
    y = np.arange(n, dtype=np.int64) % classes
    x = centers[y] + spread * rng.normal((n, dim))
    return Dataset(np.clip(x, 0.0, 1.0).astype(np.float32), y, classes)


def _glyph_banks(size: int) -> Array:
    """Canonical glyph patterns (value 1 foreground on 0 background)."""
    g = np.zeros((8, size, size), dtype=np.float32)
    yy, xx = np.mgrid[0:size, 0:size]
    c = (size - 1) / 2.0
    g[0][(yy // 2) % 2 == 0] = 1.0  # horizontal stripes
    g[1][(xx // 2) % 2 == 0] = 1.0  # vertical stripes
    g[2][np.abs(yy - xx) <= 1] = 1.0  # main diagonal
    g[3][np.abs((yy + xx) - (size - 1)) <= 1] = 1.0  # anti-diagonal
    ring = np.maximum(np.abs(yy - c), np.abs(xx - c))
    g[4][(ring >= size // 4) & (ring <= size // 4 + 1)] = 1.0  # square ring
    g[5][(np.abs(yy - c) <= 1) | (np.abs(xx - c) <= 1)] = 1.0  # plus
    g[6][(np.abs(yy - xx) <= 1) | (np.abs((yy + xx) - (size - 1)) <= 1)] = 1.0  # X
    g[7][((yy // 4) + (xx // 4)) % 2 == 0] = 1.0  # coarse checkerboard
    return g


def make_glyphs(
    seed: int,
    n: int,
    classes: int = 4,
    size: int = 16,
    noise: float = 0.15,
    max_shift: int = 2,
    contrast_jitter: float = 0.2,
    amplitude: float = 0.8,
) -> Dataset:
    """Shifted, noisy glyph images; a desk-scale stand-in for digit data.

    `amplitude` sets the foreground/background separation and therefore how
    hard the task is relative to the pixel noise.
    """
    if classes > 8:
        raise ValueError("at most 8 glyph classes available")
    rng = Rng(seed).spawn("glyphs")
    banks = _glyph_banks(size)[:classes]
    y = np.arange(n, dtype=np.int64) % classes
    x = np.zeros((n, 1, size, size), dtype=np.float32)
    shifts = rng.integers(-max_shift, max_shift + 1, (n, 2))
    contrast = 1.0 - contrast_jitter * rng.uniform(0.0, 1.0, (n,))
    for i in range(n):
        img = np.roll(banks[y[i]], (int(shifts[i, 0]), int(shifts[i, 1])), axis=(0, 1))
        x[i, 0] = img * contrast[i]
    x = 0.1 + amplitude * x + noise * rng.normal(x.shape)
    return Dataset(np.clip(x, 0.0, 1.0).astype(np.float32), y, classes)


def train_test_split(ds: Dataset, test_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    rng = Rng(seed).spawn("split")
    order = rng.permutation(len(ds))
    n_test = int(round(len(ds) * test_fraction))
    return ds.subset(order[n_test:]), ds.subset(order[:n_test])
