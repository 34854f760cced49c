//! Training, evaluation and tooling around the model.

pub mod ablate;
pub mod checkpoint;
pub mod config;
pub mod eval;
pub mod gradsuite;
pub mod model;
pub mod train;
pub mod viz;

pub use checkpoint::Checkpoint;
pub use config::{Ablations, TrainConfig};
pub use eval::{evaluate, EvalOutput};
pub use model::{Model, PreparedSample};
pub use train::{RunLog, StepRecord, TrainOptions, Trainer};
