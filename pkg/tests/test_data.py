from __future__ import annotations

import gzip
import struct

import numpy as np
import pytest

from admmprune.data import IMAGE_MAGIC, LABEL_MAGIC, Dataset, load_mnist, load_raw, parse_idx, read_idx
from admmprune.errors import DataFormatError


def idx_bytes(arr, magic):
    return struct.pack(">I", magic) + struct.pack(f">{arr.ndim}I", *arr.shape) + arr.astype(np.uint8).tobytes()


def write_split(root, prefix, images, labels):
    (root / f"{prefix}-images-idx3-ubyte").write_bytes(idx_bytes(images, IMAGE_MAGIC))
    (root / f"{prefix}-labels-idx1-ubyte").write_bytes(idx_bytes(labels, LABEL_MAGIC))


def test_parse_header_and_payload():
    arr = np.arange(24, dtype=np.uint8).reshape(2, 3, 4)
    out = parse_idx(idx_bytes(arr, IMAGE_MAGIC), IMAGE_MAGIC)
    assert out.shape == (2, 3, 4) and np.array_equal(out, arr)
    labels = parse_idx(idx_bytes(np.array([7, 1, 9]), LABEL_MAGIC), LABEL_MAGIC)
    assert labels.tolist() == [7, 1, 9]


@pytest.mark.parametrize("raw,offset", [
    (b"\x00\x00", 2),
    (b"\x00\x00\x08\x03\x00\x00\x00\x02", 8),  # header needs 16 bytes
])
def test_truncated_header(raw, offset):
    with pytest.raises(DataFormatError) as e:
        parse_idx(raw, IMAGE_MAGIC)
    assert e.value.offset == offset and f"byte offset {offset}" in str(e.value)


def test_truncated_payload_and_bad_magic():
    raw = idx_bytes(np.zeros((2, 3, 4)), IMAGE_MAGIC)
    with pytest.raises(DataFormatError) as e:
        parse_idx(raw[:-5], IMAGE_MAGIC)
    assert e.value.offset == len(raw) - 5
    with pytest.raises(DataFormatError) as e:
        parse_idx(raw, LABEL_MAGIC)
    assert e.value.offset == 0 and "0x00000803" in str(e.value)


def test_gzip_and_mismatched_counts(tmp_path):
    arr = np.arange(8, dtype=np.uint8).reshape(2, 2, 2)
    (tmp_path / "a.gz").write_bytes(gzip.compress(idx_bytes(arr, IMAGE_MAGIC)))
    assert np.array_equal(read_idx(tmp_path / "a.gz", IMAGE_MAGIC), arr)
    write_split(tmp_path, "train", np.zeros((3, 28, 28)), np.zeros(2))
    with pytest.raises(DataFormatError):
        load_raw(tmp_path, "train")
    with pytest.raises(FileNotFoundError):
        load_raw(tmp_path, "test")


def test_load_mnist_normalises_with_train_statistics(tmp_path):
    rng = np.random.default_rng(0)
    tr = rng.integers(0, 256, size=(20, 28, 28))
    te = rng.integers(0, 256, size=(5, 28, 28))
    write_split(tmp_path, "train", tr, rng.integers(0, 10, 20))
    write_split(tmp_path, "t10k", te, rng.integers(0, 10, 5))
    d = load_mnist(tmp_path)
    scaled = tr / 255.0
    assert d.mean == pytest.approx(scaled.mean()) and d.std == pytest.approx(scaled.std())
    assert d.train.images.shape == (20, 1, 28, 28) and d.test.images.shape == (5, 1, 28, 28)
    np.testing.assert_allclose(d.test.images[:, 0], (te / 255.0 - d.mean) / d.std, rtol=1e-12)
    assert d.train.labels.dtype == np.int64
    assert d.normalization() == {"scale": 1 / 255.0, "mean": d.mean, "std": d.std}


def test_subset_is_deterministic():
    ds = Dataset(np.arange(100.0).reshape(100, 1, 1, 1), np.arange(100))
    a, b = ds.subset(20, seed=3), ds.subset(20, seed=3)
    assert np.array_equal(a.labels, b.labels) and len(a) == 20
    assert np.all(np.diff(a.labels) > 0)
    assert not np.array_equal(ds.subset(20, seed=4).labels, a.labels)
    assert ds.subset(None, 0) is ds and ds.subset(500, 0) is ds


def test_canonical_mnist_headers(mnist_path):
    images, labels = load_raw(mnist_path, "train")
    assert images.shape == (60000, 28, 28) and labels.shape == (60000,)
    images, labels = load_raw(mnist_path, "test")
    assert images.shape == (10000, 28, 28) and labels.shape == (10000,)
    assert labels.max() == 9 and labels.min() == 0
    d = load_mnist(mnist_path)
    assert d.mean == pytest.approx(0.1307, abs=1e-4) and d.std == pytest.approx(0.3081, abs=1e-4)
    a = d.train.subset(2000, 0)
    assert np.array_equal(a.labels, d.train.subset(2000, 0).labels) and len(a) == 2000
