//! Embeds an owner's multi-bit binary signature into a small classifier's
//! prediction behavior and extracts it later from black-box query responses.
//!
//! The pipeline: design a class-to-bit encoding from the model's per-class
//! output activations, craft keys as targeted adversarial images, fine-tune
//! the model under a regularized loss so those keys decode to the signature,
//! then verify ownership by querying predictions and measuring bit errors.

pub mod attacks;
pub mod cli;
pub mod data;
pub mod embedding;
pub mod encoding;
pub mod error;
pub mod extraction;
pub mod keygen;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
