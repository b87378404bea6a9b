//! Criterion benchmarks for teleportation; see `benches/teleport.rs`.
