//! Closed-loop simulation: scenario files, plant, tracking controller, the
//! planner stack, traces and metrics.

use thiserror::Error;

use crate::cruise::CruiseError;
use crate::geometry::GeometryError;
use crate::lane::LaneError;
use crate::mpt::MptError;
use crate::neural::NeuralError;
use crate::sampler::SamplerError;

pub mod control;
pub mod corpus;
pub mod expert;
pub mod metrics;
pub mod plant;
pub mod roads;
pub mod run;
pub mod scenario;
pub mod stack;

pub use control::{track_trajectory, ControllerGains};
pub use metrics::{compute_metrics, MetricsReport};
pub use plant::{step_plant, Command, PlantState};
pub use run::{read_trace, run_closed_loop, write_trace, SimTrace, TickRecord};
pub use scenario::{load_scenario, save_scenario, Scenario};
pub use stack::{Mode, StackConfig, World};

#[derive(Debug, Error)]
pub enum SimError {
    /// Schema or semantic problem in an input file; `pointer` locates it.
    #[error("{pointer}: {message}")]
    Invalid { pointer: String, message: String },
    #[error("io: {0}")]
    Io(String),
    #[error("trace format: {0}")]
    Format(String),
    #[error("{0}")]
    Config(String),
    #[error(transparent)]
    Lane(#[from] LaneError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Sampler(#[from] SamplerError),
    #[error(transparent)]
    Cruise(#[from] CruiseError),
    #[error(transparent)]
    Mpt(#[from] MptError),
    #[error(transparent)]
    Neural(#[from] NeuralError),
}

impl SimError {
    /// Bad input as opposed to a failure while running.
    pub fn is_validation(&self) -> bool {
        matches!(self, SimError::Invalid { .. } | SimError::Format(_) | SimError::Config(_))
    }
}

pub type Result<T, E = SimError> = std::result::Result<T, E>;
