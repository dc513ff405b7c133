//! Planar poses, angle arithmetic, observations and the sensing graph.
//!
//! Units are centimeters and radians everywhere. Angles are kept in the
//! half-open interval (-π, π] so every heading has exactly one canonical
//! representation.

use std::collections::BTreeSet;
use std::f64::consts::{PI, TAU};

use nalgebra::{Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Wraps a finite angle into (-π, π].
///
/// Non-finite input propagates as NaN; use [`normalize_angle`] at API
/// boundaries where the input is not already known to be finite.
#[inline]
pub fn wrap_angle(a: f64) -> f64 {
    if a > -PI && a <= PI {
        return a;
    }
    let r = a.rem_euclid(TAU);
    if r > PI {
        r - TAU
    } else {
        r
    }
}

/// Signed difference `a - b` wrapped into (-π, π], without input checks.
#[inline]
pub fn angle_diff(a: f64, b: f64) -> f64 {
    wrap_angle(a - b)
}

pub fn normalize_angle(a: f64) -> Result<f64> {
    if !a.is_finite() {
        return Err(Error::NonFinite("angle"));
    }
    Ok(wrap_angle(a))
}

/// Modular angle difference, e.g. 359° − 1° = −2° rather than 358°.
pub fn angle_residual(a: f64, b: f64) -> Result<f64> {
    if !a.is_finite() || !b.is_finite() {
        return Err(Error::NonFinite("angle"));
    }
    Ok(angle_diff(a, b))
}

/// Global-frame displacement from one pose's position to another's.
#[inline]
pub fn displacement(from: &Pose2D, to: &Pose2D) -> Vector2<f64> {
    Vector2::new(to.x - from.x, to.y - from.y)
}

/// Position (cm) and heading (rad) of a robot in the global frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "RawPose")]
pub struct Pose2D {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
}

#[derive(Deserialize)]
struct RawPose {
    x: f64,
    y: f64,
    theta: f64,
}

impl From<RawPose> for Pose2D {
    fn from(p: RawPose) -> Self {
        Pose2D::new(p.x, p.y, p.theta)
    }
}

impl Pose2D {
    pub fn new(x: f64, y: f64, theta: f64) -> Self {
        Self {
            x,
            y,
            theta: wrap_angle(theta),
        }
    }

    pub fn origin() -> Self {
        Self::new(0.0, 0.0, 0.0)
    }

    pub fn position(&self) -> Vector2<f64> {
        Vector2::new(self.x, self.y)
    }

    pub fn to_vector(&self) -> Vector3<f64> {
        Vector3::new(self.x, self.y, self.theta)
    }

    pub fn from_vector(v: &Vector3<f64>) -> Self {
        Self::new(v[0], v[1], v[2])
    }

    pub fn distance_to(&self, other: &Pose2D) -> f64 {
        displacement(self, other).norm()
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.theta.is_finite()
    }
}

/// One robot's range/bearing sighting of another robot.
///
/// `bearing` is measured from the observer's heading, counter-clockwise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub observer: usize,
    pub target: usize,
    #[serde(rename = "range_cm")]
    pub range: f64,
    #[serde(rename = "bearing_rad")]
    pub bearing: f64,
}

impl Observation {
    pub fn new(observer: usize, target: usize, range: f64, bearing: f64) -> Result<Self> {
        let obs = Self {
            observer,
            target,
            range,
            bearing: normalize_angle(bearing)?,
        };
        obs.validate()?;
        Ok(obs)
    }

    pub fn validate(&self) -> Result<()> {
        if self.observer == self.target {
            return Err(Error::invalid(format!(
                "robot {} observes itself",
                self.observer
            )));
        }
        if !self.range.is_finite() || !self.bearing.is_finite() {
            return Err(Error::NonFinite("observation"));
        }
        if self.range <= 0.0 {
            return Err(Error::invalid(format!(
                "observation {}->{} has non-positive range {}",
                self.observer, self.target, self.range
            )));
        }
        Ok(())
    }

    /// The sighting expressed as a global-frame displacement, assuming the
    /// observer has heading `observer_heading`.
    pub fn perceived_displacement(&self, observer_heading: f64) -> Vector2<f64> {
        let a = self.bearing + observer_heading;
        Vector2::new(self.range * a.cos(), self.range * a.sin())
    }
}

/// Directed "who sees whom" graph. `adjacency[n]` is the set of robots `n`
/// currently observes; reciprocity is not required.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SensingGraph {
    adjacency: Vec<BTreeSet<usize>>,
}

impl SensingGraph {
    pub fn new(n_robots: usize) -> Self {
        Self {
            adjacency: vec![BTreeSet::new(); n_robots],
        }
    }

    pub fn from_observations(n_robots: usize, observations: &[Observation]) -> Result<Self> {
        let mut graph = Self::new(n_robots);
        for obs in observations {
            graph.add_edge(obs.observer, obs.target)?;
        }
        Ok(graph)
    }

    pub fn add_edge(&mut self, observer: usize, target: usize) -> Result<()> {
        let n = self.n_robots();
        if observer >= n || target >= n {
            return Err(Error::invalid(format!(
                "edge {observer}->{target} references a robot outside 0..{n}"
            )));
        }
        if observer == target {
            return Err(Error::invalid(format!("self-loop on robot {observer}")));
        }
        self.adjacency[observer].insert(target);
        Ok(())
    }

    pub fn n_robots(&self) -> usize {
        self.adjacency.len()
    }

    pub fn neighbors(&self, n: usize) -> &BTreeSet<usize> {
        &self.adjacency[n]
    }

    pub fn contains(&self, observer: usize, target: usize) -> bool {
        self.adjacency
            .get(observer)
            .is_some_and(|s| s.contains(&target))
    }

    /// Σ|M_n| over all robots.
    pub fn edge_count(&self) -> usize {
        self.adjacency.iter().map(BTreeSet::len).sum()
    }
}

/// Per-robot pose estimates and 3×3 covariances (cm², cm·rad, rad²).
#[derive(Debug, Clone, PartialEq)]
pub struct SwarmEstimate {
    poses: Vec<Pose2D>,
    covariances: Vec<Matrix3<f64>>,
}

impl SwarmEstimate {
    pub fn new(poses: Vec<Pose2D>, covariances: Vec<Matrix3<f64>>) -> Result<Self> {
        if poses.len() != covariances.len() {
            return Err(Error::invalid(format!(
                "{} poses but {} covariances",
                poses.len(),
                covariances.len()
            )));
        }
        for (i, c) in covariances.iter().enumerate() {
            check_covariance(c).map_err(|e| Error::invalid(format!("robot {i}: {e}")))?;
        }
        Ok(Self { poses, covariances })
    }

    pub fn poses(&self) -> &[Pose2D] {
        &self.poses
    }

    pub fn covariances(&self) -> &[Matrix3<f64>] {
        &self.covariances
    }

    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }
}

pub(crate) const SYMMETRY_TOL: f64 = 1e-9;

/// Symmetric within 1e-9 and eigenvalues no lower than -1e-9.
pub fn check_covariance(c: &Matrix3<f64>) -> Result<()> {
    if c.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("covariance"));
    }
    let asym = (c - c.transpose()).abs().max();
    if asym > SYMMETRY_TOL {
        return Err(Error::invalid(format!("covariance asymmetric by {asym:e}")));
    }
    let sym = (c + c.transpose()) * 0.5;
    let min_eig = sym.symmetric_eigenvalues().min();
    if min_eig < -SYMMETRY_TOL {
        return Err(Error::invalid(format!(
            "covariance has negative eigenvalue {min_eig:e}"
        )));
    }
    Ok(())
}
