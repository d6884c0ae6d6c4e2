//! Loss composition, optimization loop and checkpointing.

pub mod checkpoint;
pub mod config;
pub mod fit;
pub mod model;
pub mod optim;
pub mod step;

pub use checkpoint::{checkpoint_bytes, save_checkpoint, Checkpoint};
pub use config::{DataConfig, ModelConfig, OptimConfig, Precision, RunConfig, Schedule, TrainConfig};
pub use fit::{corpus_from_config, fit, teacher_embeddings, teacher_from_config, FitOptions, FitOutcome};
pub use model::Model;
pub use optim::Sgd;
pub use step::{compute_keys, compute_losses, saliency_label, total_loss, Batch, Losses, StepMetrics, Trainer};
