"""Benchmark package: datasets, synthetic domains, corruptions and evaluation."""
