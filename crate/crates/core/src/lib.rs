//! Prompt-conditioned dynamic mixture-of-experts segmentation of synthetic
//! pan-tumor volumes.

pub mod dmoe;
pub mod error;
pub mod gradcheck;
pub mod model;
pub mod params;
pub mod prompts;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Float, Graph, Tensor, Var};
