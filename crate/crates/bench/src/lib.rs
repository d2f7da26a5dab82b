//! Benchmark-only crate; see `benches/backend.rs`.
