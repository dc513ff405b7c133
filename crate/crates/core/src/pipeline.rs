//! End-to-end localization over a simulated trace: direct estimation,
//! UKF tracking, and Kabsch-aligned error reporting.

use std::io::Write;
use std::time::Instant;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::direct::{align_poses, estimate, observability_check, EstimationProblem, SolverConfig};
use crate::error::{Error, Result};
use crate::geometry::{wrap_angle, Observation, Pose2D, SensingGraph};
use crate::sim::SimulationTrace;
use crate::ukf::{swarm_step, MeasurementNoise, RobotFilter, SigmaPointParams};

/// Smallest sensor sigmas handed to the filter, so noise-free traces still
/// give a positive definite `R`.
pub const MIN_FILTER_SIGMA_DIST: f64 = 1e-3;
pub const MIN_FILTER_SIGMA_ANGLE: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Direct estimation on every sensor batch.
    Direct,
    /// UKF tracking started from the true poses.
    Ukf,
    /// Direct estimation on the first observable batch, then UKF tracking.
    Full,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineOptions {
    pub mode: Mode,
    pub solver: SolverConfig,
    /// Heading standard deviation (rad) of the initial filter covariance.
    pub initial_heading_sigma: f64,
    pub sigma_params: SigmaPointParams,
    /// Keep every filter state at every timestep.
    pub record_states: bool,
    /// Seed for the solver's restarts; the scenario seed when `None`.
    pub seed: Option<u64>,
}

impl PipelineOptions {
    pub fn new(mode: Mode) -> Self {
        Self {
            mode,
            solver: SolverConfig::default(),
            initial_heading_sigma: 0.3,
            sigma_params: SigmaPointParams::default(),
            record_states: false,
            seed: None,
        }
    }
}

/// Aligned error of one estimate at one sensor tick.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorSample {
    pub step: usize,
    pub t: f64,
    pub mean_error: f64,
    pub max_error: f64,
    /// Mean absolute heading error after applying the alignment rotation.
    pub heading_error: f64,
    pub per_robot: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirectRun {
    pub step: usize,
    pub t: f64,
    pub objective_value: f64,
    pub runtime_s: f64,
    pub iterations: usize,
    pub converged: bool,
    pub observable: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorReport {
    pub mode: Mode,
    pub n_robots: usize,
    pub samples: Vec<ErrorSample>,
    pub direct_runs: Vec<DirectRun>,
    pub skipped_updates: usize,
}

impl ErrorReport {
    pub fn time_averaged_error(&self) -> f64 {
        if self.samples.is_empty() {
            return f64::NAN;
        }
        self.samples.iter().map(|s| s.mean_error).sum::<f64>() / self.samples.len() as f64
    }

    /// Largest per-tick mean error at or after time `t`.
    pub fn worst_error_after(&self, t: f64) -> f64 {
        self.samples
            .iter()
            .filter(|s| s.t >= t)
            .map(|s| s.mean_error)
            .fold(0.0, f64::max)
    }

    /// Columns: `t`, `mean_error_cm`, then `robot_<i>_cm` per robot.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["t".to_string(), "mean_error_cm".to_string()];
        header.extend((0..self.n_robots).map(|i| format!("robot_{i}_cm")));
        w.write_record(&header)?;
        for s in &self.samples {
            let mut row = vec![s.t.to_string(), s.mean_error.to_string()];
            row.extend(s.per_robot.iter().map(f64::to_string));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_json<W: Write>(&self, out: W) -> Result<()> {
        serde_json::to_writer_pretty(out, self)?;
        Ok(())
    }
}

/// One filter's state at one timestep; `cov` is row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateRecord {
    pub t: f64,
    pub robot_id: usize,
    pub x: f64,
    pub y: f64,
    pub theta: f64,
    pub cov: [f64; 9],
}

impl StateRecord {
    fn from_filter(t: f64, f: &RobotFilter) -> Self {
        let p = f.pose();
        let c = f.covariance();
        let mut cov = [0.0; 9];
        for r in 0..3 {
            for k in 0..3 {
                cov[3 * r + k] = c[(r, k)];
            }
        }
        Self {
            t,
            robot_id: f.robot_id,
            x: p.x,
            y: p.y,
            theta: p.theta,
            cov,
        }
    }
}

/// JSON lines, one [`StateRecord`] per line.
pub fn write_states<W: Write>(states: &[StateRecord], mut out: W) -> Result<()> {
    for s in states {
        serde_json::to_writer(&mut out, s)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Localization {
    pub report: ErrorReport,
    /// Last estimate, aligned onto the ground truth of its tick.
    pub final_estimate: Vec<Pose2D>,
    pub final_truth: Vec<Pose2D>,
    pub states: Vec<StateRecord>,
}

pub fn error_sample(
    step: usize,
    t: f64,
    estimate: &[Pose2D],
    truth: &[Pose2D],
) -> Result<(ErrorSample, Vec<Pose2D>)> {
    let (al, mean_error, max_error) = align_poses(estimate, truth)?;
    let per_robot = al.point_errors(&truth.iter().map(Pose2D::position).collect::<Vec<_>>());
    let aligned: Vec<Pose2D> = estimate.iter().map(|p| al.apply_pose(p)).collect();
    let heading_error = aligned
        .iter()
        .zip(truth)
        .map(|(a, b)| wrap_angle(a.theta - b.theta).abs())
        .sum::<f64>()
        / truth.len() as f64;
    Ok((
        ErrorSample {
            step,
            t,
            mean_error,
            max_error,
            heading_error,
            per_robot,
        },
        aligned,
    ))
}

fn flatten(batch: &[Vec<Observation>]) -> Vec<Observation> {
    batch.iter().flatten().copied().collect()
}

pub fn is_observable(n_robots: usize, observations: &[Observation]) -> Result<bool> {
    let graph = SensingGraph::from_observations(n_robots, observations)?;
    Ok(observability_check(&graph)?.satisfied)
}

fn direct_solve(
    trace: &SimulationTrace,
    step: usize,
    observations: Vec<Observation>,
    solver: &SolverConfig,
) -> Result<(Vec<Pose2D>, DirectRun)> {
    let problem = EstimationProblem::from_observations(trace.n_robots(), observations)?;
    let started = Instant::now();
    let res = estimate(&problem, solver)?;
    let runtime_s = started.elapsed().as_secs_f64();
    let run = DirectRun {
        step,
        t: trace.timestamps[step],
        objective_value: res.objective_value,
        runtime_s,
        iterations: res.iterations,
        converged: res.converged,
        observable: res.observability.satisfied,
    };
    Ok((res.poses, run))
}

pub fn filter_noise(trace: &SimulationTrace) -> MeasurementNoise {
    MeasurementNoise {
        sigma_dist: trace.scenario.sensor.sigma_dist.max(MIN_FILTER_SIGMA_DIST),
        sigma_angle: trace
            .scenario
            .sensor
            .sigma_angle
            .max(MIN_FILTER_SIGMA_ANGLE),
    }
}

pub fn localize(trace: &SimulationTrace, opts: &PipelineOptions) -> Result<Localization> {
    if trace.n_steps() == 0 {
        return Err(Error::invalid("trace has no timesteps"));
    }
    let mut solver = opts.solver;
    solver.seed = opts.seed.unwrap_or(trace.scenario.seed);
    match opts.mode {
        Mode::Direct => localize_direct(trace, &solver),
        Mode::Ukf => {
            let start = trace.observation_batches.first().map_or(0, |b| b.step);
            let poses = trace.ground_truth[start].clone();
            track(trace, opts, start, poses, Vec::new())
        }
        Mode::Full => {
            let n = trace.n_robots();
            let mut first = None;
            for b in &trace.observation_batches {
                let obs = flatten(&b.observations);
                if is_observable(n, &obs)? {
                    first = Some((b.step, obs));
                    break;
                }
            }
            let Some((step, obs)) = first else {
                return Err(Error::Initialization(format!(
                    "none of the {} sensor batches has enough observations for {} robots",
                    trace.observation_batches.len(),
                    n
                )));
            };
            let (poses, run) = direct_solve(trace, step, obs, &solver)?;
            track(trace, opts, step, poses, vec![run])
        }
    }
}

fn localize_direct(trace: &SimulationTrace, solver: &SolverConfig) -> Result<Localization> {
    let mut samples = Vec::new();
    let mut runs = Vec::new();
    let mut last = None;
    for b in &trace.observation_batches {
        let (poses, run) = direct_solve(trace, b.step, flatten(&b.observations), solver)?;
        let truth = &trace.ground_truth[b.step];
        let (sample, aligned) = error_sample(b.step, run.t, &poses, truth)?;
        samples.push(sample);
        runs.push(run);
        last = Some((aligned, truth.clone()));
    }
    let Some((final_estimate, final_truth)) = last else {
        return Err(Error::Initialization(
            "trace contains no sensor batches".into(),
        ));
    };
    Ok(Localization {
        report: ErrorReport {
            mode: Mode::Direct,
            n_robots: trace.n_robots(),
            samples,
            direct_runs: runs,
            skipped_updates: 0,
        },
        final_estimate,
        final_truth,
        states: Vec::new(),
    })
}

/// UKF tracking from `start`, whose batch is treated as already consumed.
fn track(
    trace: &SimulationTrace,
    opts: &PipelineOptions,
    start: usize,
    initial: Vec<Pose2D>,
    direct_runs: Vec<DirectRun>,
) -> Result<Localization> {
    let n = trace.n_robots();
    let noise = filter_noise(trace);
    let p0 = Matrix3::from_diagonal(&Vector3::new(
        noise.sigma_dist.powi(2),
        noise.sigma_dist.powi(2),
        opts.initial_heading_sigma.powi(2),
    ));
    let mut filters = initial
        .iter()
        .enumerate()
        .map(|(i, p)| RobotFilter::new(i, *p, p0, opts.sigma_params, trace.scenario.motion_noise))
        .collect::<Result<Vec<_>>>()?;

    let mut samples = Vec::new();
    let mut states = Vec::new();
    let mut skipped = 0;
    let record = |k: usize, filters: &[RobotFilter], states: &mut Vec<StateRecord>| {
        if opts.record_states {
            states.extend(
                filters
                    .iter()
                    .map(|f| StateRecord::from_filter(trace.timestamps[k], f)),
            );
        }
    };

    let estimate =
        |filters: &[RobotFilter]| filters.iter().map(RobotFilter::pose).collect::<Vec<_>>();
    let (sample, mut final_estimate) = error_sample(
        start,
        trace.timestamps[start],
        &estimate(&filters),
        &trace.ground_truth[start],
    )?;
    let mut final_truth = trace.ground_truth[start].clone();
    samples.push(sample);
    record(start, &filters, &mut states);

    let empty = vec![Vec::new(); n];
    for k in start + 1..trace.n_steps() {
        let controls: Vec<_> = trace.controls[k - 1].iter().copied().map(Some).collect();
        let batch = trace.batch_at(k);
        let observations = batch.map_or(&empty, |b| &b.observations);
        let outcomes = swarm_step(&mut filters, &controls, observations, &noise)?;
        skipped += outcomes
            .iter()
            .flatten()
            .filter(|o| !o.is_applied())
            .count();
        record(k, &filters, &mut states);
        if batch.is_some() {
            let truth = &trace.ground_truth[k];
            let (sample, aligned) =
                error_sample(k, trace.timestamps[k], &estimate(&filters), truth)?;
            samples.push(sample);
            final_estimate = aligned;
            final_truth = truth.clone();
        }
    }

    Ok(Localization {
        report: ErrorReport {
            mode: opts.mode,
            n_robots: n,
            samples,
            direct_runs,
            skipped_updates: skipped,
        },
        final_estimate,
        final_truth,
        states,
    })
}
