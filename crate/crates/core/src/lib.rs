//! Numerical core of the normalization test bench: a small reverse-mode
//! autodiff engine, batch/layer normalization layers with a statistics
//! regularizer, training-inference discrepancy (TID) metrics, spectral
//! conditioning diagnostics, and a toy transformer encoder to host them.
//!
//! Everything is deterministic for a fixed seed: data generation, parameter
//! initialization, batch order, and the training loop itself. Training runs
//! in `f32`; gradient checks and measurement code prefer `f64`.

pub mod conditioning;
pub mod model;
pub mod norm;
pub mod params;
pub mod task;
pub mod train;
pub mod tensor;
pub mod tid;

#[cfg(any(test, feature = "oracles"))]
pub mod oracles;
