//! Cross-branch orthogonal deepfake detection at desk scale.

pub mod branches;
pub mod config;
pub mod data;
pub mod detector;
pub mod error;
pub mod eval;
pub mod model;
pub mod nn;
pub mod ofdm;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
