//! Loss, metrics, training loop, checkpoints and ablations.

pub mod focal;
pub mod metrics;
pub mod config;
pub mod trainer;
pub mod ablation;
pub mod checkpoint;
pub mod gradsuite;
