//! Continual learning with exact null-space gradient projection and
//! per-task neuron selection that keeps past feature matrices low-rank.

pub mod checkpoint;
pub mod cli;
pub mod datasets;
pub mod error;
pub mod linalg;
pub mod network;
pub mod pruning;
pub mod representation;
pub mod rng;
pub mod trainer;

pub use error::{Error, Result};
pub use linalg::DenseMatrix;
pub use network::{Network, TaskId};
pub use pruning::MaskSet;
pub use representation::RepTracker;
pub use trainer::{ExperimentState, Method, TrainConfig};
