//! Learned waypoint refiner: ego-frame feature encoding, a small MLP with
//! hand-written backprop, Adam training and file formats.

use thiserror::Error;

use crate::geometry::GeometryError;

pub mod features;
pub mod mlp;
pub mod train;

pub use features::{encode_features, FeatureVector};
pub use mlp::{l2_loss, MlpDims, MlpModel};
pub use train::{train, LossHistory, TrainerConfig, TrainingSample};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NeuralError {
    #[error("cold start: history shorter than 2 s")]
    ColdStart,
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("training diverged")]
    Diverged,
    #[error("empty dataset")]
    EmptyDataset,
    #[error("io: {0}")]
    Io(String),
    #[error("format: {0}")]
    Format(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

pub type Result<T, E = NeuralError> = std::result::Result<T, E>;
