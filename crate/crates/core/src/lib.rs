pub mod attention;
pub mod bench;
pub mod error;
pub mod hypersearch;
pub mod layout;
pub mod model;
pub mod numkernel;
pub mod parallel;
mod scalar;
#[cfg(test)]
mod testutil;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Matrix64 = numkernel::Matrix<f64>;
pub type Matrix32 = numkernel::Matrix<f32>;
pub type AttentionOutcome64 = attention::AttentionOutcome<f64>;
pub type Decomposition64 = attention::Decomposition<f64>;
