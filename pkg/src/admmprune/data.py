"""MNIST IDX ingestion.

IDX files start with a big-endian magic number (``0x00000803`` for 3-D
ubyte image arrays, ``0x00000801`` for 1-D ubyte label arrays) followed by one
big-endian uint32 per dimension and then the raw bytes.  Both plain and
gzip-compressed files are accepted.
"""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataFormatError

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801

TRAIN_FILES = ("train-images-idx3-ubyte", "train-labels-idx1-ubyte")
TEST_FILES = ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte")


def _read_bytes(path):
    path = Path(path)
    raw = path.read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def parse_idx(raw, expected_magic):
    """Decode an IDX byte string into a ``uint8`` array."""
    if len(raw) < 4:
        raise DataFormatError("file shorter than the IDX magic number", offset=len(raw))
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise DataFormatError(
            f"bad magic 0x{magic:08x}, expected 0x{expected_magic:08x}", offset=0)
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise DataFormatError("truncated IDX header", offset=len(raw))
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    need = header + int(np.prod(dims))
    if len(raw) < need:
        raise DataFormatError(
            f"truncated IDX payload: need {need} bytes, have {len(raw)}", offset=len(raw))
    return np.frombuffer(raw, dtype=np.uint8, count=need - header, offset=header).reshape(dims)


def read_idx(path, expected_magic):
    return parse_idx(_read_bytes(path), expected_magic)


def _find(root, name):
    for candidate in (root / name, root / (name + ".gz")):
        if candidate.exists():
            return candidate
    raise FileNotFoundError(f"{name} not found under {root}")


@dataclass
class Dataset:
    images: np.ndarray  # (N, 1, 28, 28) float
    labels: np.ndarray  # (N,) int64

    def __len__(self):
        return self.labels.shape[0]

    def subset(self, size, seed):
        """Deterministic random subset of ``size`` examples (sorted indices)."""
        if size is None or size >= len(self):
            return self
        idx = np.sort(np.random.default_rng(seed).choice(len(self), size=size, replace=False))
        return Dataset(self.images[idx], self.labels[idx])


@dataclass
class MnistData:
    train: Dataset
    test: Dataset
    mean: float
    std: float

    def normalization(self):
        return {"scale": 1.0 / 255.0, "mean": self.mean, "std": self.std}


def load_raw(path, split):
    root = Path(path)
    img_name, lbl_name = TRAIN_FILES if split == "train" else TEST_FILES
    images = read_idx(_find(root, img_name), IMAGE_MAGIC)
    labels = read_idx(_find(root, lbl_name), LABEL_MAGIC)
    if images.shape[0] != labels.shape[0]:
        raise DataFormatError(
            f"{images.shape[0]} images but {labels.shape[0]} labels in {split} split")
    return images, labels


def load_mnist(path, dtype=np.float64):
    """Load train and test splits scaled to [0, 1] then standardised.

    The single-channel mean and std are computed on the full training split
    and applied to both splits; they are returned for the run manifest.
    """
    tr_x, tr_y = load_raw(path, "train")
    te_x, te_y = load_raw(path, "test")
    tr = tr_x.astype(dtype) / 255.0
    mean = float(tr.mean())
    std = float(tr.std())

    def prep(x):
        x = x.astype(dtype) / 255.0 if x.dtype == np.uint8 else x
        return ((x - mean) / std)[:, None, :, :]

    return MnistData(
        Dataset(prep(tr), tr_y.astype(np.int64)),
        Dataset(prep(te_x), te_y.astype(np.int64)),
        mean,
        std,
    )
