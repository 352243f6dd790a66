//! Desk-scale lab for two-stage recommendation: a matrix-factorization
//! retriever feeding a neural reranker, trained either directly or as a
//! denoiser against an adversarial noise generator, with an exact discrete
//! oracle for checking the likelihood decomposition the training objective
//! is derived from.

pub mod array;
pub mod autodiff;
pub mod config;
pub mod datagen;
pub mod error;
pub mod metrics;
pub mod noise;
pub mod objectives;
pub mod oracle;
pub mod pipeline;
pub mod reranker;
pub mod retriever;
pub mod rng;
pub mod util;

pub use array::Array2;
pub use error::{Error, Result};
