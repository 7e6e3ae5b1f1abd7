//! Files, configuration, training and the command-line front end.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod gradsuite;
pub mod manifest;
pub mod models;
pub mod pnm;
pub mod train;
pub mod visualize;

pub use config::{ModelSize, ModelSpec, Stage, TrainConfig};
pub use manifest::{Manifest, Triplet};
pub use models::Models;
pub use train::{train_two_stage, Dataset, LogRow, Sample, TrainLog, TrainOutcome, Trainer};
