//! Benchmarks for the dtvit kernels; see `benches/kernels.rs`.
