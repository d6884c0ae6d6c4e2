//! Self-supervised pretraining for fine-grained recognition: momentum
//! contrast, distillation through a frozen text-embedding corpus, and
//! alignment of a learned image attention map with input-gradient saliency.

pub mod ais;
pub mod backbone;
pub mod contrastive;
pub mod data;
pub mod embfile;
pub mod error;
pub mod eval;
pub mod iadm;
pub mod rng;
pub mod tensor;
pub mod trainer;
pub mod viz;

pub use error::{Error, Result};
