//! Criterion benchmarks for `nfmusic-core`; see `benches/`.
