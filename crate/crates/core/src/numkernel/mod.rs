//! Dense numeric substrate: matrices, softmax variants, seeded randomness and PCA.

mod matrix;
mod pca;
mod rng;
mod softmax;

pub use matrix::{dot, Matrix};
pub use pca::{covariance, pca_top2, Pca2};
pub use rng::{derive_seed, SeededRng};
pub use softmax::{log_softmax, masked_softmax, softmax};
