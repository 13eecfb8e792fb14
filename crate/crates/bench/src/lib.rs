//! Benchmark-only crate; see `benches/kit.rs`.
