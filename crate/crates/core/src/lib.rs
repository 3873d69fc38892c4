//! Hierarchical planning/structure latent model for expressive piano
//! performance rendering.

pub mod autodiff;
pub mod checkpoint;
pub mod dataset;
pub mod error;
pub mod hier;
pub mod metrics;
pub mod notedata;
pub mod plot;
pub mod regularizers;
pub mod render;
pub mod seqcvae;
pub mod synthworld;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::Matrix;
