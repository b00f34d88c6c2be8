//! Optimizer, schedule, data streams, metrics and the training loop.

pub mod ablation;
pub mod config;
pub mod data;
pub mod flops;
pub mod metrics;
pub mod optim;
pub mod report;
pub mod trainer;

pub use config::{DataSpec, TrainConfig};
pub use trainer::{evaluate, train, EvalResult, StepOutcome, TrainSummary, Trainer};
