pub mod branches;
pub mod dynamic_ops;
pub mod error;
pub mod geometry;
pub mod harness;
pub mod heads;
pub mod metrics;
pub mod numerics;
pub mod oracles;
pub mod routing;

pub use error::{Error, Result};
