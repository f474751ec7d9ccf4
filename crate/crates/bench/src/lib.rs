//! Criterion benchmarks for trajcon; see `benches/`.
