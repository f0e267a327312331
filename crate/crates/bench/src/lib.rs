//! Criterion benchmarks for geowind; see `benches/`.
