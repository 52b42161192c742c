//! Conditional diffusion training that stays robust to noisy class labels.
//!
//! Each training example carries a learned pseudo condition in place of its
//! observed label. Pseudo conditions are estimated by integrating a learned
//! condition score backwards through a diffusion process over the condition
//! space, stabilised by temporal ensembling, then frozen for the rest of
//! training.

pub mod data;
pub mod diffusion;
pub mod eval;
pub mod error;
pub mod nn;
pub mod network;
pub mod pseudo;
pub mod rdc;
pub mod trainer;

pub use error::{Error, Result};
