//! Centralized relative localization for a simulated 2D robot swarm.
//!
//! Robots measure range and bearing to their neighbors. A central
//! controller first recovers the whole configuration from one batch of
//! sightings ([`direct`]), then tracks each robot with its own unscented
//! Kalman filter that treats the other robots' current estimates as
//! landmarks ([`ukf`]). Estimates are compared with ground truth after a
//! rigid (Kabsch) alignment, since no relative measurement fixes the global
//! frame.

pub mod direct;
pub mod error;
pub mod figures;
pub mod geometry;
pub mod kinematics;
pub mod pipeline;
pub mod sensor;
pub mod sim;
pub mod ukf;

pub use error::{Error, Result};
pub use geometry::{
    angle_residual, displacement, normalize_angle, Observation, Pose2D, SensingGraph, SwarmEstimate,
};
