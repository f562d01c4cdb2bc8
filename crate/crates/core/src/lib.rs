//! Entropy-weighted fine-tuning for absorbing-state discrete diffusion
//! language models, at desk scale.

pub mod decode;
pub mod diffusion;
pub mod error;
pub mod losses;
pub mod model;
pub mod rates;
pub mod rng;
pub mod schedule;
pub mod tasks;
pub mod trainer;
pub mod verify;

pub use error::{Result, WeftError};
