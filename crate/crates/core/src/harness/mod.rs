//! Desk-scale training harness: dataset ingestion, augmentation, the
//! training loop wiring clipping, optimizer and EMA together, and the
//! sweep and ablation drivers.

pub mod augment;
pub mod config;
pub mod data;
pub mod experiments;
pub mod loss;
pub mod metrics;
pub mod train;

pub use config::TrainConfig;
pub use experiments::{ablate, sweep};
pub use train::{train, RunSummary};
