"""Structured-sparsity training of small CNNs with ADMM, baselines and GEMM benchmarks."""

__version__ = "0.1.0"
