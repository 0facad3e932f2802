//! Criterion benchmarks for the core hot paths live under `benches/`; this
//! crate has no library code of its own.
