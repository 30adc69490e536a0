//! Multimodal multi-source domain adaptation with co-training.

pub mod discrepancy;
pub mod disentangle;
pub mod cotrain;
pub mod datagen;
pub mod error;
pub mod model;
pub mod nets;
pub mod pipeline;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
