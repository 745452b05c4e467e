//! Criterion benchmarks for the guard pipeline, exact transport and the
//! traffic simulator; run with `cargo bench -p vsl-bench`.
