//! Reconstructive visual supervision for a small multimodal causal LM.

pub mod analysis;
pub mod config;
pub mod container;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod experiment;
pub mod image;
pub mod mmlm;
pub mod nn;
pub mod objectives;
pub mod schedules;
pub mod synthdata;
pub mod tokenizers;
pub mod trainer;

pub use error::{Result, RossError};
pub use ross_autograd as autograd;

/// Single-precision instantiations used by the CLI.
pub type Model = mmlm::MultimodalLm<f32>;
pub type Objective = objectives::VisualObjective<f32>;
pub type Trainer = trainer::Trainer<f32>;
pub type Tokenizer = tokenizers::Tokenizer<f32>;

/// Double-precision instantiations used by gradient checks.
pub type Model64 = mmlm::MultimodalLm<f64>;
pub type Trainer64 = trainer::Trainer<f64>;
