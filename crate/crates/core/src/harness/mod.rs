//! Synthetic data, the toy trainer, evaluation, verification and benchmarks.

pub mod eval;
pub mod model;
pub mod scene;
pub mod train;
pub mod bench;
pub mod verify;
