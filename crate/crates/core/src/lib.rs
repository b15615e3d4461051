//! Deterministic federated-learning simulator with gradient centralization.

pub mod config;
pub mod data;
pub mod engine;
pub mod error;
pub mod gc;
pub mod metrics;
pub mod nn;
pub mod partition;
pub mod runner;
pub mod seed;
pub mod tensor;
pub mod theory;

pub use config::ExperimentConfig;
pub use engine::{Aggregation, RoundRecord, Simulation, StrategyKind};
pub use error::{Error, Result};
pub use tensor::{GradientTensor, Tensor};
