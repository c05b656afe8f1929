//! Diffusion-based sequential recommendation with stability-routed guidance.
//!
//! A causal encoder turns a user's history into a guidance vector that
//! conditions a denoising diffusion model over item embeddings. Before
//! encoding, histories are routed by the entropy of their adjacent-pair
//! continuity: steady histories lose redundant items through dual-side
//! Thompson sampling, while erratic ones are re-weighted by how much each
//! item reduces the error of predicting what comes next.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod counterfactual;
pub mod data;
pub mod diffusion;
pub mod dts;
pub mod encoder;
pub mod error;
pub mod evaluator;
pub mod model;
pub mod rng;
pub mod stability;
pub mod tensor;
pub mod trainer;

pub use config::{load_config, ModelConfig};
pub use error::{CardError, Result};
pub use model::{CardModel, Variant};
