//! Hybrid motion planning: a sample-based candidate planner feeds a neural
//! trajectory refiner whose output is made kinematically feasible and
//! collision-free by a model predictive trajectory optimizer.

pub mod cruise;
pub mod geometry;
pub mod lane;
pub mod mpt;
pub mod neural;
pub mod qp;
pub mod sampler;
pub mod sim;
