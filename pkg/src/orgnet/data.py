"""Dataset construction: IDX ingestion, 15x15 pooling, noise, float addition."""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801


class IdxFormatError(ValueError):
    """An IDX file failed validation; the message names the offending field."""


@dataclass
class LabeledDataset:
    inputs: np.ndarray  # (n, d)
    targets: np.ndarray  # (n, t); one-hot rows for classification
    split: str = "train"

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.targets = np.asarray(self.targets, dtype=np.float64)
        if self.inputs.ndim != 2 or self.targets.ndim != 2:
            raise ValueError("inputs and targets must be 2-d arrays")
        if len(self.inputs) != len(self.targets):
            raise ValueError(
                f"{len(self.inputs)} inputs vs {len(self.targets)} targets"
            )

    def __len__(self) -> int:
        return len(self.inputs)


def _open_maybe_gzip(path):
    with open(path, "rb") as f:
        head = f.read(2)
    if head == b"\x1f\x8b":
        return gzip.open(path, "rb")
    return open(path, "rb")


def _read_be_u32(f, path, what: str) -> int:
    raw = f.read(4)
    if len(raw) != 4:
        raise IdxFormatError(f"{path}: truncated while reading {what}")
    return struct.unpack(">I", raw)[0]


def load_mnist_idx(images_path, labels_path) -> LabeledDataset:
    """Parse big-endian IDX image/label files into a [0,1]-scaled dataset.

    Accepts gzip-compressed files transparently. Labels become one-hot
     10-vectors. Fails closed on bad magic numbers, truncation, or an
    image/label count mismatch.
    """
    with _open_maybe_gzip(images_path) as f:
        magic = _read_be_u32(f, images_path, "image magic")
        if magic != IMAGE_MAGIC:
            raise IdxFormatError(
                f"{images_path}: image magic {magic:#010x}, expected {IMAGE_MAGIC:#010x}"
            )
        count = _read_be_u32(f, images_path, "image count")
        rows = _read_be_u32(f, images_path, "row count")
        cols = _read_be_u32(f, images_path, "column count")
        raw = f.read(count * rows * cols)
        if len(raw) != count * rows * cols:
            raise IdxFormatError(
                f"{images_path}: pixel data truncated ({len(raw)} of {count * rows * cols} bytes)"
            )
        pixels = np.frombuffer(raw, dtype=np.uint8).reshape(count, rows * cols)

    with _open_maybe_gzip(labels_path) as f:
        magic = _read_be_u32(f, labels_path, "label magic")
        if magic != LABEL_MAGIC:
            raise IdxFormatError(
                f"{labels_path}: label magic {magic:#010x}, expected {LABEL_MAGIC:#010x}"
            )
        label_count = _read_be_u32(f, labels_path, "label count")
        raw = f.read(label_count)
        if len(raw) != label_count:
            raise IdxFormatError(
                f"{labels_path}: label data truncated ({len(raw)} of {label_count} bytes)"
            )
        labels = np.frombuffer(raw, dtype=np.uint8)

    if label_count != count:
        raise IdxFormatError(
            f"image/label count mismatch: {count} images vs {label_count} labels"
        )
    if np.any(labels > 9):
        raise IdxFormatError(f"{labels_path}: label values out of range 0..9")

    inputs = pixels.astype(np.float64) / 255.0
    targets = np.zeros((count, 10))
    targets[np.arange(count), labels] = 1.0
    return LabeledDataset(inputs, targets)


@lru_cache(maxsize=None)
def _pool_matrix(src: int, dst: int) -> np.ndarray:
    """(dst, src) area-overlap weights; each row sums to 1."""
    m = np.zeros((dst, src))
    scale = src / dst
    for i in range(dst):
        lo, hi = i * scale, (i + 1) * scale
        for j in range(int(np.floor(lo)), min(src, int(np.ceil(hi)))):
            overlap = min(hi, j + 1) - max(lo, j)
            if overlap > 0:
                m[i, j] = overlap
    return m / scale


def downsample_15(img: np.ndarray) -> np.ndarray:
    """Area-weighted pooling of one flat 28x28 image down to flat 15x15."""
    img = np.asarray(img, dtype=np.float64)
    if img.shape != (784,):
        raise ValueError(f"expected a flat 784-pixel image, got shape {img.shape}")
    m = _pool_matrix(28, 15)
    return (m @ img.reshape(28, 28) @ m.T).reshape(225)


def downsample_dataset(ds: LabeledDataset) -> LabeledDataset:
    """downsample_15 applied to every image (one matrix product per side)."""
    if ds.inputs.shape[1] != 784:
        raise ValueError(f"expected 784-pixel inputs, got {ds.inputs.shape[1]}")
    m = _pool_matrix(28, 15)
    imgs = ds.inputs.reshape(-1, 28, 28)
    pooled = np.einsum("ij,njk,lk->nil", m, imgs, m, optimize=True)
    return LabeledDataset(pooled.reshape(-1, 225), ds.targets.copy(), ds.split)


def add_input_noise(ds: LabeledDataset, sigma: float, rng: np.random.Generator) -> LabeledDataset:
    """Independent N(0, sigma^2) on every input component; targets untouched."""
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    if sigma == 0:
        return LabeledDataset(ds.inputs.copy(), ds.targets.copy(), ds.split)
    noisy = ds.inputs + rng.normal(0.0, sigma, size=ds.inputs.shape)
    return LabeledDataset(noisy, ds.targets.copy(), ds.split)


def make_addition_dataset(n: int, rng: np.random.Generator, split: str = "train") -> LabeledDataset:
    """n pairs drawn uniformly from [0, 0.5]^2 with their exact sums as targets."""
    if n < 1:
        raise ValueError("n must be >= 1")
    inputs = rng.uniform(0.0, 0.5, size=(n, 2))
    targets = inputs.sum(axis=1, keepdims=True)
    return LabeledDataset(inputs, targets, split)


def batches(ds: LabeledDataset, batch_size: int, rng: np.random.Generator):
    """One epoch of batches: seeded shuffle, contiguous chunks, short tail kept."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    order = rng.permutation(len(ds))
    for start in range(0, len(ds), batch_size):
        idx = order[start : start + batch_size]
        yield ds.inputs[idx], ds.targets[idx]


def mnist_file_names() -> dict[str, tuple[str, str]]:
    """Standard IDX file names per split (gz suffix optional on disk)."""
    return {
        "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
        "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
    }


def find_mnist_pair(data_dir, split: str) -> tuple[Path, Path]:
    """Locate the (images, labels) files for a split, preferring uncompressed."""
    data_dir = Path(data_dir)
    images_name, labels_name = mnist_file_names()[split]
    pair = []
    for name in (images_name, labels_name):
        plain, gz = data_dir / name, data_dir / (name + ".gz")
        if plain.exists():
            pair.append(plain)
        elif gz.exists():
            pair.append(gz)
        else:
            raise FileNotFoundError(
                f"missing MNIST file {plain} (or {gz}); "
                "set the data directory or run the fetch-mnist subcommand"
            )
    return pair[0], pair[1]


def load_mnist_split(data_dir, split: str) -> LabeledDataset:
    images_path, labels_path = find_mnist_pair(data_dir, split)
    ds = load_mnist_idx(images_path, labels_path)
    ds.split = split
    return ds
