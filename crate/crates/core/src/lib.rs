//! Correlation-guided moment retrieval and highlight detection on
//! pre-extracted clip and word features.
//!
//! The model is a detection transformer whose video-text fusion uses
//! adaptive cross-attention with query-conditioned dummy tokens, trained
//! with clip-level correspondence supervision, a prototype alignment and
//! attention distillation objective, and a multi-level saliency token.

pub mod attention;
pub mod autograd;
pub mod correlation;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod heads;
pub mod model;
pub mod nn;
pub mod objectives;
pub mod optim;
pub mod pipeline;
pub mod saliency;
pub mod tensor;
pub mod types;

pub use error::{Error, Result};
pub use tensor::Matrix;
pub use types::*;
