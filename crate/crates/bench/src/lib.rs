//! Criterion benchmarks for the lola engine; see `benches/engine.rs`.
