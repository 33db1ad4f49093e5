//! Criterion benchmarks for `nvreadout`; see `benches/`.
