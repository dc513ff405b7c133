//! Per-robot unscented Kalman filtering.
//!
//! Each robot keeps its own filter over `[x, y, θ]`. The predict step runs
//! the differential-drive model; the update treats the other robots'
//! current estimates as known landmarks and consumes whatever subset of the
//! swarm the robot happened to see in its last scan.

mod filter;
pub mod sigma;
mod swarm;

pub use filter::{
    measurement_function, MeasurementBatch, MeasurementEntry, MeasurementNoise, MotionNoise,
    RobotFilter, UpdateOutcome,
};
pub use sigma::{generate_sigma_points, SigmaPointParams, SigmaPoints, SigmaWeights};
pub use swarm::{swarm_step, swarm_step_ordered};
