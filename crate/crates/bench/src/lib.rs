//! Benchmark-only crate; see `benches/hotpaths.rs` for the measurements.
