//! Benchmark-only crate; see `benches/relaxations.rs`.
