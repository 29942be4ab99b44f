//! Benchmark-only crate; see `benches/kernels.rs`. The package exists so the
//! criterion targets have a home without weighing down the core library.
