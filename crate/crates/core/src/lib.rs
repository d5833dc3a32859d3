//! Layout-conditioned multimodal diffusion transformers at desk scale.

pub mod diagnostics;
pub mod diffusion;
pub mod encoders;
pub mod error;
pub mod harness;
pub mod layoutkit;
pub mod mmdit;
pub mod numcore;
pub mod params;
pub mod rng;
pub mod scenes;

pub use error::{Error, Result};
