//! Criterion benchmarks for `failsafe-core`; see `benches/failsafe.rs`.
