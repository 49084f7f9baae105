//! Transformer reconstruction models for time-series anomaly detection,
//! trained under one-phase, two-phase adversarial or iterative
//! self-adversarial regimes, with their architecture chosen by NSGA-II
//! multi-objective search and anomalies flagged by extreme-value thresholds.

pub mod config;
pub mod dataset;
pub mod detect;
pub mod error;
pub mod graph;
pub mod model;
pub mod nas;
pub mod pipeline;
pub mod scoring;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use graph::{Activation, Graph, NormKind, Var};
pub use tensor::Tensor;
