//! Codon-level alignment and fusion of DNA, RNA and protein embedding tracks.
//!
//! The crate contains a small reverse-mode autodiff engine ([`autodiff`]),
//! the alignment of per-modality tracks to the protein frame ([`alignment`]),
//! the fusion strategies ([`fusion`]), a TextCNN prediction head ([`head`]),
//! and the training loop, metrics and file formats around them.

pub mod alignment;
pub mod autodiff;
pub mod checkpoint;
pub mod data;
mod error;
pub mod fusion;
pub mod head;
pub mod metrics;
pub mod model;
pub mod nn;
mod seed;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::Tensor;
