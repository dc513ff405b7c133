//! Batch ("direct") estimation of the whole swarm configuration from a single
//! set of range/bearing observations.
//!
//! For each sighting of robot `m` by robot `n` the model compares the
//! displacement `d_mn = x_m - x_n` in the candidate global map with the
//! locally perceived displacement, i.e. the measured range along the
//! measured bearing rotated by `n`'s candidate heading:
//!
//! ```text
//! φ = Σ_n Σ_{m ∈ M_n} | d_mn - ρ_mn (cos(β_mn + θ_n), sin(β_mn + θ_n)) |²
//! ```
//!
//! The global rotation and translation are unobservable, so robot 0 is pinned
//! at the origin with zero heading, leaving `3N - 3` free variables.

pub mod kabsch;
pub mod lm;

use std::collections::BTreeSet;
use std::f64::consts::{PI, TAU};

use nalgebra::{DMatrix, DVector, Rotation2, Vector2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{displacement, wrap_angle, Observation, Pose2D, SensingGraph};

pub use kabsch::{align_poses, kabsch_align, Alignment};

/// Outcome of the counting test `2 Σ|M_n| ≥ 3N − 3`.
///
/// Necessary for a unique solution but not sufficient: a graph can pass the
/// count and still admit several configurations with equal φ.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Observability {
    pub satisfied: bool,
    pub observation_count: usize,
    pub dof: usize,
}

pub fn observability_check(graph: &SensingGraph) -> Result<Observability> {
    let n = graph.n_robots();
    if n < 2 {
        return Err(Error::invalid(format!(
            "observability needs at least 2 robots, got {n}"
        )));
    }
    let observation_count = 2 * graph.edge_count();
    let dof = 3 * n - 3;
    Ok(Observability {
        satisfied: observation_count >= dof,
        observation_count,
        dof,
    })
}

#[derive(Debug, Clone)]
pub struct EstimationProblem {
    graph: SensingGraph,
    observations: Vec<Observation>,
    initial_guess: Option<Vec<Pose2D>>,
}

impl EstimationProblem {
    pub fn new(
        graph: SensingGraph,
        observations: Vec<Observation>,
        initial_guess: Option<Vec<Pose2D>>,
    ) -> Result<Self> {
        for obs in &observations {
            obs.validate()?;
            if !graph.contains(obs.observer, obs.target) {
                return Err(Error::invalid(format!(
                    "observation {}->{} is not in the sensing graph",
                    obs.observer, obs.target
                )));
            }
        }
        if let Some(guess) = &initial_guess {
            if guess.len() != graph.n_robots() {
                return Err(Error::invalid(format!(
                    "initial guess has {} poses for {} robots",
                    guess.len(),
                    graph.n_robots()
                )));
            }
        }
        Ok(Self {
            graph,
            observations,
            initial_guess,
        })
    }

    /// Builds the graph from the observations themselves.
    pub fn from_observations(n_robots: usize, observations: Vec<Observation>) -> Result<Self> {
        let graph = SensingGraph::from_observations(n_robots, &observations)?;
        Self::new(graph, observations, None)
    }

    pub fn with_initial_guess(mut self, guess: Vec<Pose2D>) -> Result<Self> {
        if guess.len() != self.n_robots() {
            return Err(Error::invalid(format!(
                "initial guess has {} poses for {} robots",
                guess.len(),
                self.n_robots()
            )));
        }
        self.initial_guess = Some(guess);
        Ok(self)
    }

    pub fn graph(&self) -> &SensingGraph {
        &self.graph
    }

    pub fn observations(&self) -> &[Observation] {
        &self.observations
    }

    pub fn n_robots(&self) -> usize {
        self.graph.n_robots()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    pub tolerance: f64,
    pub max_iterations: usize,
    /// Total starts, the nominal guess included.
    pub restarts: usize,
    pub seed: u64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            tolerance: 1e-8,
            max_iterations: 500,
            restarts: 5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimationResult {
    pub poses: Vec<Pose2D>,
    /// Final φ (cm²).
    pub objective_value: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Robots that observe nobody; φ does not depend on their heading.
    pub unobservable_headings: Vec<usize>,
    pub observability: Observability,
}

fn check_ids(n_poses: usize, observations: &[Observation]) -> Result<()> {
    for o in observations {
        let id = o.observer.max(o.target);
        if id >= n_poses {
            return Err(Error::invalid(format!(
                "observation {}->{} references robot {id} but only {n_poses} poses were given",
                o.observer, o.target
            )));
        }
    }
    Ok(())
}

#[inline]
fn edge_residual(poses: &[Pose2D], o: &Observation) -> Vector2<f64> {
    let n = &poses[o.observer];
    displacement(n, &poses[o.target]) - o.perceived_displacement(n.theta)
}

/// φ in cm².
pub fn objective(poses: &[Pose2D], observations: &[Observation]) -> Result<f64> {
    check_ids(poses.len(), observations)?;
    Ok(observations
        .iter()
        .map(|o| edge_residual(poses, o).norm_squared())
        .sum())
}

/// ∂φ/∂(x_i, y_i, θ_i) for every robot, laid out `[x0, y0, θ0, x1, ...]`.
pub fn objective_gradient(poses: &[Pose2D], observations: &[Observation]) -> Result<Vec<f64>> {
    check_ids(poses.len(), observations)?;
    let mut g = vec![0.0; 3 * poses.len()];
    for o in observations {
        let r = edge_residual(poses, o);
        let a = o.bearing + poses[o.observer].theta;
        let (n, m) = (3 * o.observer, 3 * o.target);
        g[m] += 2.0 * r.x;
        g[m + 1] += 2.0 * r.y;
        g[n] -= 2.0 * r.x;
        g[n + 1] -= 2.0 * r.y;
        // ∂r/∂θ_n = ρ (sin a, -cos a)
        g[n + 2] += 2.0 * o.range * (r.x * a.sin() - r.y * a.cos());
    }
    Ok(g)
}

/// Gauge-fixed least-squares view: parameters are `(x, y, θ)` of robots
/// `1..N`, robot 0 is fixed at the origin.
struct GaugeFixed<'a> {
    n_robots: usize,
    observations: &'a [Observation],
}

impl GaugeFixed<'_> {
    fn poses(&self, x: &DVector<f64>) -> Vec<Pose2D> {
        let mut poses = Vec::with_capacity(self.n_robots);
        poses.push(Pose2D::origin());
        for i in 1..self.n_robots {
            let k = 3 * (i - 1);
            // headings are left unwrapped while iterating
            poses.push(Pose2D {
                x: x[k],
                y: x[k + 1],
                theta: x[k + 2],
            });
        }
        poses
    }

    fn column(robot: usize) -> Option<usize> {
        robot.checked_sub(1).map(|i| 3 * i)
    }
}

impl lm::LeastSquares for GaugeFixed<'_> {
    fn residuals(&self, x: &DVector<f64>) -> DVector<f64> {
        let poses = self.poses(x);
        let mut r = DVector::zeros(2 * self.observations.len());
        for (k, o) in self.observations.iter().enumerate() {
            let e = edge_residual(&poses, o);
            r[2 * k] = e.x;
            r[2 * k + 1] = e.y;
        }
        r
    }

    fn jacobian(&self, x: &DVector<f64>) -> DMatrix<f64> {
        let poses = self.poses(x);
        let mut j = DMatrix::zeros(2 * self.observations.len(), x.len());
        for (k, o) in self.observations.iter().enumerate() {
            let row = 2 * k;
            if let Some(c) = Self::column(o.target) {
                j[(row, c)] = 1.0;
                j[(row + 1, c + 1)] = 1.0;
            }
            if let Some(c) = Self::column(o.observer) {
                let a = o.bearing + poses[o.observer].theta;
                j[(row, c)] = -1.0;
                j[(row + 1, c + 1)] = -1.0;
                j[(row, c + 2)] = o.range * a.sin();
                j[(row + 1, c + 2)] = -o.range * a.cos();
            }
        }
        j
    }
}

/// Robots on a circle whose radius is the mean observed range, all headings
/// zero, shifted so robot 0 sits at the origin.
pub fn default_initial_guess(n_robots: usize, observations: &[Observation]) -> Vec<Pose2D> {
    let radius = if observations.is_empty() {
        1.0
    } else {
        observations.iter().map(|o| o.range).sum::<f64>() / observations.len() as f64
    };
    let step = TAU / n_robots as f64;
    (0..n_robots)
        .map(|i| {
            let a = step * i as f64;
            Pose2D::new(radius * (a.cos() - 1.0), radius * a.sin(), 0.0)
        })
        .collect()
}

/// Rigidly moves `poses` so robot 0 lands on the origin with zero heading.
fn pin_first(poses: &[Pose2D]) -> Vec<Pose2D> {
    let p0 = poses[0];
    let rot = Rotation2::new(-p0.theta);
    poses
        .iter()
        .map(|p| {
            let q = rot * displacement(&p0, p);
            Pose2D::new(q.x, q.y, p.theta - p0.theta)
        })
        .collect()
}

fn pack(poses: &[Pose2D]) -> DVector<f64> {
    DVector::from_iterator(
        3 * (poses.len() - 1),
        poses[1..].iter().flat_map(|p| [p.x, p.y, p.theta]),
    )
}

fn jitter(base: &[Pose2D], scale: f64, rng: &mut ChaCha8Rng) -> Vec<Pose2D> {
    let mut out: Vec<_> = base
        .iter()
        .map(|p| {
            let dx: f64 = rng.sample(StandardNormal);
            let dy: f64 = rng.sample(StandardNormal);
            let th: f64 = rng.random_range(-PI..PI);
            Pose2D::new(p.x + scale * dx, p.y + scale * dy, th)
        })
        .collect();
    out[0] = Pose2D::origin();
    out
}

/// Minimizes φ from several starts and keeps the lowest.
///
/// An unsatisfied observability count is logged but not fatal; the solver
/// still returns its (likely wrong) best configuration.
pub fn estimate(problem: &EstimationProblem, config: &SolverConfig) -> Result<EstimationResult> {
    let n = problem.n_robots();
    let observability = observability_check(problem.graph())?;
    if !observability.satisfied {
        log::warn!(
            "observability count not met: {} observations for {} degrees of freedom",
            observability.observation_count,
            observability.dof
        );
    }
    if config.restarts == 0 {
        return Err(Error::invalid("solver needs at least one start"));
    }

    let observations = problem.observations();
    let ls = GaugeFixed {
        n_robots: n,
        observations,
    };
    let settings = lm::LmSettings {
        gradient_tolerance: config.tolerance,
        max_iterations: config.max_iterations,
    };

    let nominal = match &problem.initial_guess {
        Some(g) => pin_first(g),
        None => default_initial_guess(n, observations),
    };
    let mean_range = if observations.is_empty() {
        1.0
    } else {
        observations.iter().map(|o| o.range).sum::<f64>() / observations.len() as f64
    };
    let scale = 0.5 * mean_range;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let mut best: Option<(DVector<f64>, f64, f64, usize)> = None;
    let mut total_iterations = 0;
    for start in 0..config.restarts {
        let guess = if start == 0 {
            nominal.clone()
        } else {
            jitter(&nominal, scale, &mut rng)
        };
        match lm::minimize(&ls, pack(&guess), &settings) {
            lm::LmOutcome::Finished {
                x,
                cost,
                gradient_norm,
                iterations,
            } => {
                total_iterations += iterations;
                if best.as_ref().is_none_or(|b| cost < b.1) {
                    best = Some((x, cost, gradient_norm, iterations));
                }
            }
            lm::LmOutcome::Diverged { last_x, iterations } => {
                return Err(Error::Divergence {
                    iterations: total_iterations + iterations,
                    last_iterate: ls.poses(&last_x).into_iter().map(normalized).collect(),
                });
            }
        }
    }

    let (x, cost, gradient_norm, _) = best.expect("at least one start");
    let poses: Vec<_> = ls.poses(&x).into_iter().map(normalized).collect();
    let observers: BTreeSet<usize> = observations.iter().map(|o| o.observer).collect();
    Ok(EstimationResult {
        poses,
        objective_value: cost,
        iterations: total_iterations,
        converged: gradient_norm < config.tolerance,
        unobservable_headings: (0..n).filter(|i| !observers.contains(i)).collect(),
        observability,
    })
}

fn normalized(p: Pose2D) -> Pose2D {
    Pose2D {
        theta: wrap_angle(p.theta),
        ..p
    }
}
