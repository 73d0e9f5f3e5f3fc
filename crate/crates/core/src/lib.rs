//! Structure-conditioned latent diffusion for RNA sequence design, with
//! step-wise policy-gradient fine-tuning against folding-based rewards.

pub mod ablation;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod evaluate;
pub mod fold;
pub mod gradcheck;
pub mod layout;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod pretrain;
pub mod rewards;
pub mod rng;
pub mod sampler;
pub mod schedule;
pub mod sequence;
pub mod tensor;
pub mod trainer;

pub use error::{Error, ErrorCategory, Result};
