//! Contrastive + masked + noise-conditioned pretraining of Vision Transformers on CPU.

pub mod augment;
pub mod container;
pub mod cost;
pub mod data;
pub mod error;
pub mod eval;
pub mod model;
pub mod nn;
pub mod objectives;
pub mod patch;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
