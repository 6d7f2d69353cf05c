//! Criterion benchmarks for the hot paths of `cotlab-core`; see `benches/`.
