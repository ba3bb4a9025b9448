"""Dense tensor helpers: GEMM lowering of convolution and matrix compaction.

Weight tensors are plain ``numpy`` arrays of shape ``(A, B, C, D)``
(filters, channels, kernel height, kernel width), stored row-major with the
kernel width index fastest.  Lowering a weight tensor to its GEMM matrix is a
reshape to ``(A, B*C*D)``; column ``j`` of that matrix corresponds to the
``(b, c, d)`` position with ``j = (b*C + c)*D + d``.  Activations are lowered
by :func:`im2col` with the same ``(b, c, d)`` row order, so a zeroed shape
position or channel is a zeroed column of the weight matrix and can be
compacted away together with the matching activation rows.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .errors import DegenerateConstraintError, ShapeError

TENSOR_FORMAT = "admmprune-tensors/1"


def check_tensor4(w):
    w = np.asarray(w)
    if w.ndim != 4:
        raise ShapeError(f"expected a 4-D weight tensor, got shape {w.shape}")
    if min(w.shape) < 1:
        raise ShapeError(f"all tensor dims must be >= 1, got {w.shape}")
    return w


def check_matrix(m):
    m = np.asarray(m)
    if m.ndim != 2:
        raise ShapeError(f"expected a matrix, got shape {m.shape}")
    return m


def to_gemm_matrix(w):
    """Flatten each filter of ``w`` into one row of an ``A x (B*C*D)`` matrix."""
    w = check_tensor4(w)
    return np.ascontiguousarray(w).reshape(w.shape[0], -1)


def from_gemm_matrix(m, dims):
    """Inverse of :func:`to_gemm_matrix`."""
    m = check_matrix(m)
    dims = tuple(int(d) for d in dims)
    if m.shape != (dims[0], int(np.prod(dims[1:]))):
        raise ShapeError(f"matrix {m.shape} does not match tensor dims {dims}")
    return m.reshape(dims)


def gemm(m, x):
    """Matrix product ``m @ x`` with shape checking.

    Backed by the BLAS linked into numpy; for a fixed input, thread count and
    machine the result is bit-identical across calls.
    """
    m = check_matrix(m)
    x = check_matrix(x)
    if m.shape[1] != x.shape[0]:
        raise ShapeError(f"cannot multiply {m.shape} by {x.shape}")
    return m @ x


def _check_keep(keep, n, what):
    keep = np.asarray(keep, dtype=np.intp).ravel()
    if keep.size == 0:
        raise DegenerateConstraintError(f"empty {what} keep list")
    if keep.min() < 0 or keep.max() >= n:
        raise IndexError(f"{what} index out of range [0, {n})")
    if np.any(np.diff(keep) <= 0):
        raise ValueError(f"{what} indices must be strictly increasing")
    return keep


def compact_rows(m, keep):
    """Return the dense matrix made of rows ``keep`` of ``m`` (in order)."""
    m = check_matrix(m)
    keep = _check_keep(keep, m.shape[0], "row")
    return np.ascontiguousarray(m[keep, :])


def compact_columns(m, keep):
    """Return the dense matrix made of columns ``keep`` of ``m`` (in order)."""
    m = check_matrix(m)
    keep = _check_keep(keep, m.shape[1], "column")
    return np.ascontiguousarray(m[:, keep])


def nonzero_rows(m):
    """Indices of rows of ``m`` holding at least one nonzero entry."""
    return np.flatnonzero(np.any(check_matrix(m) != 0, axis=1))


def nonzero_columns(m):
    """Indices of columns of ``m`` holding at least one nonzero entry."""
    return np.flatnonzero(np.any(check_matrix(m) != 0, axis=0))


def conv_output_size(size, k):
    if size < k:
        raise ShapeError(f"kernel {k} larger than input {size}")
    return size - k + 1


def im2col(x, kh, kw):
    """Lower a batch ``x`` of shape ``(N, B, H, W)`` for a stride-1 valid conv.

    Returns a ``(B*kh*kw, N*OH*OW)`` matrix whose rows follow the
    ``(b, c, d)`` order of :func:`to_gemm_matrix` and whose columns run over
    ``(n, oh, ow)`` with ``ow`` fastest.
    """
    n, b, h, w = x.shape
    oh, ow = conv_output_size(h, kh), conv_output_size(w, kw)
    win = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))
    # win: (N, B, OH, OW, kh, kw) -> (B, kh, kw, N, OH, OW)
    cols = win.transpose(1, 4, 5, 0, 2, 3).reshape(b * kh * kw, n * oh * ow)
    return np.ascontiguousarray(cols)


def col2im(cols, x_shape, kh, kw):
    """Adjoint of :func:`im2col`: scatter-add columns back onto the input grid."""
    n, b, h, w = x_shape
    oh, ow = h - kh + 1, w - kw + 1
    c6 = cols.reshape(b, kh, kw, n, oh, ow)
    dx = np.zeros((n, b, h, w), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            dx[:, :, i:i + oh, j:j + ow] += c6[:, i, j].transpose(1, 0, 2, 3)
    return dx


class PruneMask:
    """Binary keep-mask congruent with one weight tensor.

    ``bits`` is stored as a boolean array; applying the mask zeroes every
    position whose bit is 0.
    """

    __slots__ = ("bits",)

    def __init__(self, bits):
        bits = np.asarray(bits)
        if bits.dtype != np.bool_:
            if not np.all((bits == 0) | (bits == 1)):
                raise ValueError("mask bits must be 0 or 1")
            bits = bits.astype(bool)
        self.bits = bits
        self.bits.setflags(write=False)

    @property
    def shape(self):
        return self.bits.shape

    def count(self):
        return int(self.bits.sum())

    def apply(self, t):
        t = np.asarray(t)
        if t.shape != self.bits.shape:
            raise ShapeError(f"mask shape {self.bits.shape} != tensor shape {t.shape}")
        return np.where(self.bits, t, np.zeros((), dtype=t.dtype))

    def __eq__(self, other):
        if not isinstance(other, PruneMask):
            return NotImplemented
        return self.bits.shape == other.bits.shape and bool(np.all(self.bits == other.bits))

    def __repr__(self):
        return f"PruneMask(shape={self.bits.shape}, ones={self.count()})"


def save_arrays(path, arrays, meta=None):
    """Write named arrays as one little-endian blob plus a JSON manifest.

    Produces ``<path>.bin`` and ``<path>.json``.  The manifest lists, per
    array, its name, dims, dtype and byte offset into the blob.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    entries = []
    offset = 0
    with open(path.with_suffix(".bin"), "wb") as fh:
        for name, arr in arrays.items():
            arr = np.asarray(arr)
            le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
            raw = np.ascontiguousarray(le).tobytes()
            fh.write(raw)
            entries.append({
                "name": name,
                "dims": list(arr.shape),
                "dtype": le.dtype.str,
                "offset": offset,
                "nbytes": len(raw),
            })
            offset += len(raw)
    manifest = {"format": TENSOR_FORMAT, "arrays": entries, "meta": meta or {}}
    path.with_suffix(".json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return manifest


def load_arrays(path):
    """Read arrays written by :func:`save_arrays`; returns ``(arrays, meta)``."""
    path = Path(path)
    manifest = json.loads(path.with_suffix(".json").read_text())
    if manifest.get("format") != TENSOR_FORMAT:
        raise ValueError(f"unknown tensor format {manifest.get('format')!r}")
    blob = path.with_suffix(".bin").read_bytes()
    arrays = {}
    for e in manifest["arrays"]:
        raw = blob[e["offset"]:e["offset"] + e["nbytes"]]
        if len(raw) != e["nbytes"]:
            raise ValueError(f"truncated blob for array {e['name']!r}")
        arr = np.frombuffer(raw, dtype=np.dtype(e["dtype"])).reshape(e["dims"])
        arrays[e["name"]] = arr.astype(arr.dtype.newbyteorder("="))
    return arrays, manifest.get("meta", {})
