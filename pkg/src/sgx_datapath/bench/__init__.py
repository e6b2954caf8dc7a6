"""Benchmark workloads, measurement harness, shape checks and plotting."""

from .harness import BenchRecord, MatrixConfig, parse_csv, run_cell, run_matrix, throughput_mbps, write_csv
from .workloads import AesVariant, FindMaxVariant, Workload, find_max

__all__ = ["AesVariant", "BenchRecord", "FindMaxVariant", "MatrixConfig", "Workload", "find_max",
           "parse_csv", "run_cell", "run_matrix", "throughput_mbps", "write_csv"]
