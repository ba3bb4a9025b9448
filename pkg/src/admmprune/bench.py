"""CPU GEMM benchmark: dense vs. row/column-compacted vs. CSR.

Structured pruning leaves a smaller *dense* GEMM (fewer weight rows, or
fewer weight columns together with the matching activation rows).  Irregular
pruning leaves a sparse matrix at the same element count, multiplied here
through scipy's CSR kernel.  Each timed variant is first checked against a
dense reference in float64; timings are then taken in the benchmark dtype.
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from threadpoolctl import threadpool_limits

from .errors import ShapeError
from .tensor import check_matrix, compact_columns, compact_rows, gemm

MIN_REPS = 21


@dataclass(frozen=True)
class CsrMatrix:
    rows: int
    cols: int
    row_ptr: np.ndarray
    col_idx: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        rp, ci = self.row_ptr, self.col_idx
        if rp.shape != (self.rows + 1,) or rp[0] != 0:
            raise ValueError("row_ptr must have rows+1 entries starting at 0")
        if np.any(np.diff(rp) < 0):
            raise ValueError("row_ptr must be non-decreasing")
        if not rp[-1] == ci.shape[0] == self.values.shape[0]:
            raise ValueError("row_ptr[-1], len(col_idx) and len(values) must agree")
        if ci.size and (ci.min() < 0 or ci.max() >= self.cols):
            raise ValueError("column index out of range")
        # strictly increasing within each row: consecutive pairs (j, j+1)
        # are compared unless j+1 starts a new row
        row_start = np.zeros(ci.shape[0] + 1, dtype=bool)
        row_start[rp[1:-1]] = True
        same_row = ~row_start[1:ci.shape[0]]
        if np.any(np.diff(ci)[same_row] <= 0):
            raise ValueError("column indices must increase within each row")

    @property
    def nnz(self):
        return int(self.values.shape[0])

    @property
    def shape(self):
        return (self.rows, self.cols)


def build_csr(m):
    """Lossless CSR encoding of the nonzeros of ``m``."""
    m = check_matrix(m)
    rows, cols = np.nonzero(m)  # row-major order
    counts = np.bincount(rows, minlength=m.shape[0])
    row_ptr = np.zeros(m.shape[0] + 1, dtype=np.int64)
    np.cumsum(counts, out=row_ptr[1:])
    return CsrMatrix(m.shape[0], m.shape[1], row_ptr, cols.astype(np.int64), m[rows, cols].copy())


def densify(a):
    out = np.zeros(a.shape, dtype=a.values.dtype)
    rows = np.repeat(np.arange(a.rows), np.diff(a.row_ptr))
    out[rows, a.col_idx] = a.values
    return out


def _scipy(a):
    return sp.csr_matrix((a.values, a.col_idx, a.row_ptr), shape=a.shape)


def csr_gemm(a, x):
    """``a @ x`` for CSR ``a`` and dense ``x`` via scipy's sparse kernel."""
    x = check_matrix(x)
    if a.cols != x.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {x.shape}")
    return np.asarray(_scipy(a) @ x)


# --- timing ------------------------------------------------------------------

@dataclass(frozen=True)
class BenchCase:
    """One conv layer's GEMM: ``filters x inner`` weights times ``inner x cols``."""

    name: str
    filters: int
    inner: int
    cols: int
    note: str = ""


# Activation widths follow the usual 227x227 AlexNet feature maps (55^2, 27^2,
# 13^2); conv filter counts are scaled down 4x except for the full-size case.
DEFAULT_CASES = (
    BenchCase("alexnet-like", 256, 2304, 3025, "256 filters x 256*3*3 inner x 55*55 cols"),
    BenchCase("alexnet-conv2/4", 64, 1200, 729, "grouped conv2, 48*5*5 inner, 27*27 cols"),
    BenchCase("alexnet-conv3/4", 96, 2304, 169, "256*3*3 inner, 13*13 cols"),
    BenchCase("alexnet-conv4/4", 96, 1728, 169, "grouped conv4, 192*3*3 inner"),
    BenchCase("alexnet-conv5/4", 64, 1728, 169, "grouped conv5, 192*3*3 inner"),
    BenchCase("lenet-c-conv1", 8, 9, 676, "1*3*3 inner, 26*26 cols"),
    BenchCase("lenet-c-conv2", 16, 72, 121, "8*3*3 inner, 11*11 cols"),
)
DEFAULT_LEVELS = (0.0, 0.25, 0.5, 0.75, 0.9)


@dataclass
class Timing:
    median: float
    q1: float
    q3: float

    @property
    def iqr(self):
        return self.q3 - self.q1

    @property
    def unstable(self):
        return self.iqr > 0.5 * self.median


@dataclass
class BenchReport:
    case_id: str
    rows: int
    inner: int
    cols: int
    kind: str  # "column" or "row" structured pruning
    level: float  # pruned fraction
    kept: int  # rows or columns kept
    nnz: int  # nonzero weights, shared by the compacted and CSR variants
    dense: Timing
    compacted: Timing
    csr: Timing
    threads: int = 1
    reps: int = MIN_REPS
    unstable: bool = False
    correct: bool = True

    @property
    def compacted_speedup(self):
        return self.dense.median / self.compacted.median

    @property
    def csr_speedup(self):
        return self.dense.median / self.csr.median

    def flat(self):
        d = {k: v for k, v in asdict(self).items() if k not in ("dense", "compacted", "csr")}
        for name in ("dense", "compacted", "csr"):
            t = getattr(self, name)
            d[f"{name}_median_s"] = t.median
            d[f"{name}_iqr_s"] = t.iqr
        d["compacted_speedup"] = self.compacted_speedup
        d["csr_speedup"] = self.csr_speedup
        return d


TIMING_FIELDS = ("dense_median_s", "dense_iqr_s", "compacted_median_s", "compacted_iqr_s",
                 "csr_median_s", "csr_iqr_s", "compacted_speedup", "csr_speedup", "unstable")


def time_call(fn, reps=MIN_REPS, warmup=3):
    """Median and quartiles of ``reps`` wall-clock timings after ``warmup`` calls."""
    for _ in range(warmup):
        fn()
    samples = np.empty(reps)
    for i in range(reps):
        t0 = time.perf_counter()
        fn()
        samples[i] = time.perf_counter() - t0
    q1, med, q3 = np.percentile(samples, [25, 50, 75])
    return Timing(float(med), float(q1), float(q3))


def _timed_stable(fn, reps, warmup, retries):
    t = time_call(fn, reps, warmup)
    for _ in range(retries):
        if not t.unstable:
            break
        t = time_call(fn, reps, warmup)
    return t


def allclose_rel(actual, reference, rtol=1e-6):
    """Element-wise relative agreement, with an absolute floor far below ``rtol``.

    The floor (``1e-12 * max|reference|``) only matters for entries that are
    themselves rounding-level, where a relative comparison is meaningless.
    """
    scale = float(np.max(np.abs(reference))) if reference.size else 0.0
    return bool(np.allclose(actual, reference, rtol=rtol, atol=1e-12 * scale))


@dataclass
class LayerOperands:
    w: np.ndarray  # full dense weights (dense baseline)
    x: np.ndarray
    w_zeroed: np.ndarray  # structured-pruned weights, zeros kept in place
    keep: np.ndarray
    w_irregular: np.ndarray  # same nnz, scattered zeros


def make_operands(case, kind, level, rng, dtype):
    w = rng.standard_normal((case.filters, case.inner))
    x = rng.standard_normal((case.inner, case.cols))
    n = case.inner if kind == "column" else case.filters
    kept = max(1, int(np.floor((1.0 - level) * n + 0.5)))
    keep = np.sort(rng.choice(n, size=kept, replace=False))
    w_zeroed = np.zeros_like(w)
    if kind == "column":
        w_zeroed[:, keep] = w[:, keep]
    else:
        w_zeroed[keep, :] = w[keep, :]
    nnz = int(np.count_nonzero(w_zeroed))
    flat = np.zeros(w.size, dtype=bool)
    flat[rng.choice(w.size, size=nnz, replace=False)] = True
    w_irregular = np.where(flat.reshape(w.shape), w, 0.0)
    return LayerOperands(*(a.astype(dtype) for a in (w, x, w_zeroed)), keep,
                         w_irregular.astype(dtype))


def _variants(ops, kind):
    """Callables computing (dense, compacted, csr) products for ``ops``."""
    if kind == "column":
        wc = compact_columns(ops.w_zeroed, ops.keep)
        xc = compact_rows(ops.x, ops.keep)
        compacted = lambda: gemm(wc, xc)  # noqa: E731
        expand = lambda y: y  # noqa: E731
    else:
        wc = compact_rows(ops.w_zeroed, ops.keep)
        compacted = lambda: gemm(wc, ops.x)  # noqa: E731

        def expand(y):
            full = np.zeros((ops.w.shape[0], y.shape[1]), dtype=y.dtype)
            full[ops.keep] = y
            return full
    csr = build_csr(ops.w_irregular)
    a_sp = _scipy(csr)
    return (
        lambda: gemm(ops.w, ops.x),
        compacted,
        expand,
        lambda: a_sp @ ops.x,
    )


def correctness_gate(ops, kind, rtol=1e-6):
    """Check the compacted and CSR variants against dense products with zeros, in float64."""
    ops64 = LayerOperands(*(a.astype(np.float64) for a in (ops.w, ops.x, ops.w_zeroed)),
                          ops.keep, ops.w_irregular.astype(np.float64))
    _, compacted, expand, csr = _variants(ops64, kind)
    ok_compact = allclose_rel(expand(compacted()), gemm(ops64.w_zeroed, ops64.x), rtol)
    ok_csr = allclose_rel(np.asarray(csr()), gemm(ops64.w_irregular, ops64.x), rtol)
    return ok_compact and ok_csr


def run_case(case, kind, level, reps=MIN_REPS, warmup=3, threads=1, seed=0,
             dtype=np.float32, retries=2):
    if reps < MIN_REPS:
        raise ValueError(f"at least {MIN_REPS} repetitions are required")
    rng = np.random.default_rng(seed)
    ops = make_operands(case, kind, level, rng, dtype)
    correct = correctness_gate(ops, kind)
    if not correct:
        raise AssertionError(f"{case.name} {kind} {level}: variant disagrees with dense reference")
    dense, compacted, _, csr = _variants(ops, kind)
    with threadpool_limits(limits=threads):
        t_dense = _timed_stable(dense, reps, warmup, retries)
        t_comp = _timed_stable(compacted, reps, warmup, retries)
        t_csr = _timed_stable(csr, reps, warmup, retries)
    return BenchReport(
        case_id=f"{case.name}/t{threads}", rows=case.filters, inner=case.inner, cols=case.cols,
        kind=kind, level=level, kept=int(ops.keep.size), nnz=int(np.count_nonzero(ops.w_zeroed)),
        dense=t_dense, compacted=t_comp, csr=t_csr, threads=threads, reps=reps,
        unstable=any(t.unstable for t in (t_dense, t_comp, t_csr)), correct=correct)


def run_layer_bench(cases=DEFAULT_CASES, levels=DEFAULT_LEVELS, kinds=("column", "row"),
                    reps=MIN_REPS, warmup=3, threads=1, seed=0, dtype=np.float32):
    reports = []
    for ci, case in enumerate(cases):
        for kind in kinds:
            for li, level in enumerate(levels):
                reports.append(run_case(case, kind, level, reps, warmup, threads,
                                        seed=seed + 1000 * ci + li, dtype=dtype))
    return reports


def write_reports(reports, out_dir):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = [r.flat() for r in reports]
    if rows:
        with open(out_dir / "bench.csv", "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
            writer.writeheader()
            writer.writerows(rows)
    (out_dir / "bench.json").write_text(json.dumps(rows, indent=2))
    return out_dir


def format_table(rows):
    """Speedup table, one line per (case, kind, variant), one column per pruned fraction.

    ``rows`` are :class:`BenchReport` objects or their :meth:`BenchReport.flat` dicts.
    """
    rows = [r.flat() if isinstance(r, BenchReport) else r for r in rows]
    levels = sorted({r["level"] for r in rows})
    head = f"{'case':<24}{'kind':<8}{'variant':<11}" + "".join(f"{lv:>9.0%}" for lv in levels)
    lines = [head, "-" * len(head)]
    groups = {}
    for r in rows:
        groups.setdefault((r["case_id"], r["kind"]), {})[r["level"]] = r
    for (case_id, kind), by_level in groups.items():
        for variant in ("compacted", "csr"):
            cells = [f"{by_level[lv][variant + '_speedup']:>8.2f}x" if lv in by_level else f"{'-':>9}"
                     for lv in levels]
            lines.append(f"{case_id:<24}{kind:<8}{variant:<11}" + "".join(cells))
    return "\n".join(lines)
