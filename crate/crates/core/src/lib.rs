//! Credibility-aware late fusion of unimodal classifiers with a probabilistic circuit.

pub mod circuit;
pub mod circuit_io;
pub mod cli;
pub mod data;
pub mod error;
pub mod experiments;
pub mod fusion;
pub mod inference;
pub mod json;
pub mod metrics;
pub mod model;
pub mod predictor;
pub mod special;
pub mod train;

pub use circuit::{build_fusion_circuit, Circuit, InitConfig, Node, NodeId, VarId};
pub use error::{Error, Result};
pub use inference::{Evidence, ProbVector};
pub use model::{FusionMode, FusionModel, ModelConfig};
pub use train::{train, TrainConfig};
