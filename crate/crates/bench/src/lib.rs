//! Criterion benchmarks of the circulant GP live under `benches/`.
