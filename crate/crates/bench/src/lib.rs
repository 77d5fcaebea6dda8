//! Criterion benchmarks for the ffprop kernels live in `benches/`.
