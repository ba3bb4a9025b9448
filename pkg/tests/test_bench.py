from __future__ import annotations

import json

import numpy as np
import pytest

from admmprune import bench
from admmprune.bench import BenchCase, CsrMatrix, build_csr, csr_gemm, densify
from admmprune.errors import ShapeError

MID = BenchCase("mid", 128, 1152, 729)


def sparse_matrix(rng, shape, density):
    return np.where(rng.random(shape) < density, rng.standard_normal(shape), 0.0)


def test_build_csr_examples():
    z = build_csr(np.zeros((3, 4)))
    assert z.nnz == 0 and z.row_ptr.tolist() == [0, 0, 0, 0]
    eye = build_csr(np.eye(3))
    assert eye.nnz == 3 and eye.col_idx.tolist() == [0, 1, 2] and eye.row_ptr.tolist() == [0, 1, 2, 3]


def test_csr_round_trip():
    rng = np.random.default_rng(0)
    for density in (0.0, 0.05, 0.3, 1.0):
        m = sparse_matrix(rng, (17, 23), density)
        assert np.array_equal(densify(build_csr(m)), m)


@pytest.mark.parametrize("row_ptr,col_idx", [
    ([0, 2, 1], [0, 1]),  # decreasing row_ptr
    ([0, 1, 3], [0, 1]),  # row_ptr[-1] != nnz
    ([0, 2, 2], [1, 1]),  # repeated column in a row
    ([0, 2, 2], [1, 0]),  # unsorted row
    ([0, 1, 2], [0, 5]),  # column out of range
    ([1, 1, 2], [0, 1]),  # does not start at 0
])
def test_csr_invariants_are_enforced(row_ptr, col_idx):
    with pytest.raises(ValueError):
        CsrMatrix(2, 3, np.array(row_ptr), np.array(col_idx), np.ones(len(col_idx)))


def test_csr_allows_column_reset_between_rows():
    a = CsrMatrix(2, 3, np.array([0, 2, 4]), np.array([1, 2, 0, 1]), np.arange(1.0, 5.0))
    np.testing.assert_array_equal(densify(a), [[0, 1, 2], [3, 4, 0]])


def test_csr_gemm():
    rng = np.random.default_rng(1)
    m = rng.standard_normal((4, 3))
    np.testing.assert_array_equal(csr_gemm(build_csr(np.eye(4)), m), m)
    assert not csr_gemm(build_csr(np.zeros((2, 4))), m).any()
    a = sparse_matrix(rng, (50, 80), 0.1)
    x = rng.standard_normal((80, 30))
    ref = a @ x
    assert bench.allclose_rel(csr_gemm(build_csr(a), x), ref, rtol=1e-6)
    with pytest.raises(ShapeError):
        csr_gemm(build_csr(a), x.T)


def test_operands_share_element_sparsity():
    rng = np.random.default_rng(2)
    case = BenchCase("t", 12, 40, 9)
    for kind, n in (("column", 40), ("row", 12)):
        ops = bench.make_operands(case, kind, 0.75, rng, np.float64)
        assert ops.keep.size == n // 4
        assert np.count_nonzero(ops.w_irregular) == np.count_nonzero(ops.w_zeroed)
        assert bench.correctness_gate(ops, kind)


def test_gate_catches_a_wrong_variant(monkeypatch):
    ops = bench.make_operands(BenchCase("t", 8, 20, 5), "column", 0.5, np.random.default_rng(3), np.float64)
    real = bench.compact_rows
    monkeypatch.setattr(bench, "compact_rows", lambda m, k: real(m, k) * (1 + 1e-5))
    assert not bench.correctness_gate(ops, "column")


def test_timing_stats():
    t = bench.Timing(median=1.0, q1=0.6, q3=1.2)
    assert t.iqr == pytest.approx(0.6) and t.unstable
    assert not bench.Timing(1.0, 0.9, 1.1).unstable
    calls = []
    t = bench.time_call(lambda: calls.append(1), reps=21, warmup=3)
    assert len(calls) == 24 and t.q1 <= t.median <= t.q3
    with pytest.raises(ValueError):
        bench.run_case(MID, "column", 0.5, reps=5)


def test_full_kept_fraction_costs_the_same_as_dense():
    r = bench.run_case(MID, "column", 0.0, seed=0)
    assert r.correct and r.kept == MID.inner
    assert 0.8 <= r.compacted_speedup <= 1.25


def test_compacted_time_is_monotone_in_pruned_fraction():
    reports = bench.run_layer_bench([MID], kinds=("column", "row"), seed=1)
    for kind in ("column", "row"):
        times = [r.compacted.median for r in reports if r.kind == kind]
        inversions = [(a, b) for a, b in zip(times, times[1:]) if b > a]
        assert len(inversions) <= 1, times
        assert all(b - a <= 0.05 * a for a, b in inversions), times


def test_reports_round_trip_through_files(tmp_path):
    reports = bench.run_layer_bench([BenchCase("tiny", 8, 72, 121)], levels=(0.0, 0.5), kinds=("row",))
    bench.write_reports(reports, tmp_path)
    rows = json.loads((tmp_path / "bench.json").read_text())
    assert [r["level"] for r in rows] == [0.0, 0.5] and rows[0]["case_id"] == "tiny/t1"
    header = (tmp_path / "bench.csv").read_text().splitlines()[0].split(",")
    assert set(bench.TIMING_FIELDS) <= set(header)
    for r, rep in zip(rows, reports):
        assert r["compacted_speedup"] == rep.dense.median / rep.compacted.median
    table = bench.format_table(rows)
    assert "tiny/t1" in table and "compacted" in table and "csr" in table
    assert bench.format_table(reports) == table
