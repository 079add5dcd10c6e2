//! Fine-grained category discovery from coarsely labeled data by denoised
//! neighborhood aggregation.
//!
//! The pipeline pretrains an MLP encoder with coarse cross-entropy, then
//! alternates between retrieving and filtering nearest neighbors from a
//! momentum-encoder feature bank (E-step) and pulling each query toward its
//! filtered neighbors with a multi-positive contrastive loss (M-step).
//! Fine-grained clusters are recovered with K-Means on the test split.

pub mod ablation;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod denoise;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod linalg;
pub mod membank;
pub mod objective;
pub mod rng;
pub mod synthdata;
pub mod trainer;

pub use error::{DnaError, Result};
