//! Ground-truth swarm simulation: formations, maneuvers, wheel slip and the
//! sensing schedule, plus JSON-lines trace I/O.

use std::f64::consts::TAU;
use std::io::{BufRead, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{wrap_angle, Observation, Pose2D};
use crate::kinematics::{advance, ControlInput};
use crate::sensor::{sense, SensorNoiseModel};
use crate::ukf::MotionNoise;

pub const FORWARD_SPEED: f64 = 3.0;
pub const TURN_RATE: f64 = 20.0 * std::f64::consts::PI / 180.0;
/// Turn rate of the `forward_arcs` maneuver; the sign flips every
/// [`ARC_PERIOD`] seconds.
pub const ARC_TURN_RATE: f64 = 5.0 * std::f64::consts::PI / 180.0;
pub const ARC_PERIOD: f64 = 10.0;
pub const MAX_PLACEMENT_ATTEMPTS: usize = 10_000;

const FORMATION_STREAM: u64 = 0;
const MOTION_STREAM: u64 = 1;
const SENSOR_STREAM: u64 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Formation {
    Random,
    Circle,
    Line,
    Grid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Trajectory {
    Static,
    RotateInPlace,
    ForwardArcs,
    WaypointList,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SlipModel {
    /// Chance per second that a non-slipping robot starts to slip.
    pub probability_per_second: f64,
    pub duration: f64,
    /// Multiplier applied to the true wheel speeds while slipping.
    #[serde(default = "default_slip_factor")]
    pub factor: f64,
}

fn default_slip_factor() -> f64 {
    0.5
}

impl Default for SlipModel {
    fn default() -> Self {
        Self {
            probability_per_second: 0.0,
            duration: 1.0,
            factor: default_slip_factor(),
        }
    }
}

fn default_robot_radius() -> f64 {
    10.0
}
fn default_wheel_base() -> f64 {
    8.0
}
fn default_predict_rate() -> f64 {
    30.0
}
fn default_sensor_rate() -> f64 {
    1.0
}

/// Declarative description of one simulated run. Lengths in cm, times in s.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub n_robots: usize,
    pub field_size: f64,
    #[serde(default = "default_robot_radius")]
    pub robot_radius: f64,
    #[serde(default = "default_wheel_base")]
    pub wheel_base: f64,
    pub formation: Formation,
    pub trajectory: Trajectory,
    /// Offsets from each robot's start, visited in order by `waypoint_list`.
    #[serde(default)]
    pub waypoints: Vec<[f64; 2]>,
    pub duration: f64,
    #[serde(default = "default_predict_rate")]
    pub predict_rate: f64,
    #[serde(default = "default_sensor_rate")]
    pub sensor_rate: f64,
    #[serde(default)]
    pub sensor: SensorNoiseModel,
    #[serde(default)]
    pub motion_noise: MotionNoise,
    #[serde(default)]
    pub slip_model: SlipModel,
    #[serde(default)]
    pub seed: u64,
}

impl Scenario {
    pub fn validate(&self) -> Result<()> {
        if self.n_robots < 2 {
            return Err(Error::invalid(format!(
                "n_robots must be at least 2, got {}",
                self.n_robots
            )));
        }
        for (name, v) in [
            ("field_size", self.field_size),
            ("robot_radius", self.robot_radius),
            ("wheel_base", self.wheel_base),
            ("duration", self.duration),
            ("predict_rate", self.predict_rate),
            ("sensor_rate", self.sensor_rate),
        ] {
            if !v.is_finite() || v <= 0.0 {
                return Err(Error::invalid(format!("{name} must be > 0, got {v}")));
            }
        }
        if self.sensor_rate > self.predict_rate {
            return Err(Error::invalid(format!(
                "sensor_rate {} exceeds predict_rate {}",
                self.sensor_rate, self.predict_rate
            )));
        }
        if self.trajectory == Trajectory::WaypointList && self.waypoints.is_empty() {
            return Err(Error::invalid("waypoint_list trajectory needs waypoints"));
        }
        if self.waypoints.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("waypoint"));
        }
        let s = &self.slip_model;
        if !(0.0..=f64::MAX).contains(&s.probability_per_second)
            || !(0.0..=f64::MAX).contains(&s.duration)
            || !(0.0..=f64::MAX).contains(&s.factor)
        {
            return Err(Error::invalid(
                "slip_model probability, duration and factor must be finite and >= 0",
            ));
        }
        self.sensor.validate()?;
        self.motion_noise.validate()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let s: Scenario = serde_json::from_str(text)?;
        s.validate()?;
        Ok(s)
    }

    pub fn dt(&self) -> f64 {
        1.0 / self.predict_rate
    }

    /// Number of timesteps, counting both t = 0 and t = duration.
    pub fn n_steps(&self) -> usize {
        (self.duration * self.predict_rate).round() as usize + 1
    }

    /// Predict steps between sensor ticks.
    pub fn sensor_interval(&self) -> usize {
        ((self.predict_rate / self.sensor_rate).round() as usize).max(1)
    }

    pub fn is_sensor_tick(&self, step: usize) -> bool {
        step.is_multiple_of(self.sensor_interval())
    }
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Initial poses. Structured formations share heading 0 so that identical
/// commands move them rigidly; random formations get random headings.
pub fn build_formation<R: Rng + ?Sized>(scenario: &Scenario, rng: &mut R) -> Result<Vec<Pose2D>> {
    let n = scenario.n_robots;
    let spacing = 4.0 * scenario.robot_radius;
    let poses = match scenario.formation {
        Formation::Circle => {
            let (c, r) = (scenario.field_size / 2.0, scenario.field_size / 4.0);
            (0..n)
                .map(|i| {
                    let a = TAU * i as f64 / n as f64;
                    Pose2D::new(c + r * a.cos(), c + r * a.sin(), 0.0)
                })
                .collect()
        }
        Formation::Line => (0..n)
            .map(|i| Pose2D::new(spacing * i as f64, 0.0, 0.0))
            .collect(),
        Formation::Grid => {
            let cols = (n as f64).sqrt().ceil() as usize;
            (0..n)
                .map(|i| {
                    Pose2D::new(
                        spacing * (i % cols) as f64,
                        spacing * (i / cols) as f64,
                        0.0,
                    )
                })
                .collect()
        }
        Formation::Random => {
            let min_sep = 3.0 * scenario.robot_radius;
            let mut placed: Vec<Pose2D> = Vec::with_capacity(n);
            let mut attempts = 0;
            while placed.len() < n {
                if attempts == MAX_PLACEMENT_ATTEMPTS {
                    return Err(Error::InfeasibleScenario(format!(
                        "placed only {} of {n} robots with separation {min_sep} cm after {attempts} attempts",
                        placed.len()
                    )));
                }
                attempts += 1;
                let x = rng.random_range(0.0..scenario.field_size);
                let y = rng.random_range(0.0..scenario.field_size);
                if placed.iter().all(|p| (p.x - x).hypot(p.y - y) >= min_sep) {
                    placed.push(Pose2D::new(x, y, 0.0));
                }
            }
            for p in &mut placed {
                p.theta = wrap_angle(rng.random_range(-std::f64::consts::PI..std::f64::consts::PI));
            }
            placed
        }
    };
    Ok(poses)
}

/// Commanded wheel speeds for one robot at time `t`.
fn policy(
    scenario: &Scenario,
    start: &Pose2D,
    pose: &Pose2D,
    t: f64,
    leg: &mut usize,
) -> ControlInput {
    let (dt, wb) = (scenario.dt(), scenario.wheel_base);
    match scenario.trajectory {
        Trajectory::Static => ControlInput::stationary(dt, wb),
        Trajectory::RotateInPlace => ControlInput::from_body_velocity(0.0, TURN_RATE, dt, wb),
        Trajectory::ForwardArcs => {
            let sign = if ((t / ARC_PERIOD).floor() as i64) % 2 == 0 {
                1.0
            } else {
                -1.0
            };
            ControlInput::from_body_velocity(FORWARD_SPEED, sign * ARC_TURN_RATE, dt, wb)
        }
        Trajectory::WaypointList => {
            while let Some(w) = scenario.waypoints.get(*leg) {
                let (gx, gy) = (start.x + w[0], start.y + w[1]);
                let (dx, dy) = (gx - pose.x, gy - pose.y);
                let dist = dx.hypot(dy);
                if dist <= 1e-9 {
                    *leg += 1;
                    continue;
                }
                let err = wrap_angle(dy.atan2(dx) - pose.theta);
                let turn_step = TURN_RATE * dt;
                return if err.abs() > turn_step {
                    ControlInput::from_body_velocity(0.0, TURN_RATE * err.signum(), dt, wb)
                } else if err.abs() > 1e-9 {
                    ControlInput::from_body_velocity(0.0, err / dt, dt, wb)
                } else {
                    ControlInput::from_body_velocity(FORWARD_SPEED.min(dist / dt), 0.0, dt, wb)
                };
            }
            ControlInput::stationary(dt, wb)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensorBatch {
    pub step: usize,
    /// `observations[i]` are robot `i`'s sightings at this tick.
    pub observations: Vec<Vec<Observation>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulationTrace {
    pub scenario: Scenario,
    pub timestamps: Vec<f64>,
    pub ground_truth: Vec<Vec<Pose2D>>,
    /// `controls[k]` are the reported commands applied from step k to k+1;
    /// the final entry is stationary.
    pub controls: Vec<Vec<ControlInput>>,
    pub observation_batches: Vec<SensorBatch>,
}

impl SimulationTrace {
    pub fn n_steps(&self) -> usize {
        self.timestamps.len()
    }

    pub fn n_robots(&self) -> usize {
        self.scenario.n_robots
    }

    pub fn batch_at(&self, step: usize) -> Option<&SensorBatch> {
        self.observation_batches
            .binary_search_by_key(&step, |b| b.step)
            .ok()
            .map(|i| &self.observation_batches[i])
    }
}

/// Every ordered pair within range, sensed in (observer, target) order.
pub fn sense_all<R: Rng + ?Sized>(
    poses: &[Pose2D],
    model: &SensorNoiseModel,
    rng: &mut R,
) -> Result<Vec<Vec<Observation>>> {
    let mut out = vec![Vec::new(); poses.len()];
    for (i, a) in poses.iter().enumerate() {
        for (j, b) in poses.iter().enumerate() {
            if i != j {
                if let Some(o) = sense(i, a, j, b, model, rng)? {
                    out[i].push(o);
                }
            }
        }
    }
    Ok(out)
}

/// Runs the scenario. Formation, motion and sensing draw from independent
/// streams of the seed, so changing the sensor leaves the truth untouched.
pub fn run(scenario: &Scenario) -> Result<SimulationTrace> {
    scenario.validate()?;
    let mut formation_rng = stream(scenario.seed, FORMATION_STREAM);
    let mut motion_rng = stream(scenario.seed, MOTION_STREAM);
    let mut sensor_rng = stream(scenario.seed, SENSOR_STREAM);

    let n = scenario.n_robots;
    let n_steps = scenario.n_steps();
    let dt = scenario.dt();
    let start = build_formation(scenario, &mut formation_rng)?;

    let mut poses = start.clone();
    let mut legs = vec![0usize; n];
    let mut slip_left = vec![0.0f64; n];
    let slip_p = scenario.slip_model.probability_per_second * dt;

    let mut timestamps = Vec::with_capacity(n_steps);
    let mut ground_truth = Vec::with_capacity(n_steps);
    let mut controls = Vec::with_capacity(n_steps);
    let mut observation_batches = Vec::new();

    for k in 0..n_steps {
        let t = k as f64 * dt;
        timestamps.push(t);
        ground_truth.push(poses.clone());
        if scenario.is_sensor_tick(k) {
            observation_batches.push(SensorBatch {
                step: k,
                observations: sense_all(&poses, &scenario.sensor, &mut sensor_rng)?,
            });
        }
        if k + 1 == n_steps {
            controls.push(vec![ControlInput::stationary(dt, scenario.wheel_base); n]);
            break;
        }
        let mut step_controls = Vec::with_capacity(n);
        for i in 0..n {
            let c = policy(scenario, &start[i], &poses[i], t, &mut legs[i]);
            let u: f64 = motion_rng.random();
            if slip_left[i] <= 0.0 && u < slip_p {
                slip_left[i] = scenario.slip_model.duration;
            }
            let actual = if slip_left[i] > 0.0 {
                slip_left[i] -= dt;
                c.scaled(scenario.slip_model.factor)
            } else {
                c
            };
            poses[i] = advance(&poses[i], &actual);
            step_controls.push(c);
        }
        controls.push(step_controls);
    }

    Ok(SimulationTrace {
        scenario: scenario.clone(),
        timestamps,
        ground_truth,
        controls,
        observation_batches,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum TraceRecord {
    Header {
        scenario: Scenario,
        n_steps: usize,
    },
    Step {
        step: usize,
        t: f64,
        truth: Vec<Pose2D>,
        controls: Vec<ControlInput>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        observations: Option<Vec<Vec<Observation>>>,
    },
}

/// One header line with the scenario, then one line per timestep.
pub fn write_trace<W: Write>(trace: &SimulationTrace, mut out: W) -> Result<()> {
    let header = TraceRecord::Header {
        scenario: trace.scenario.clone(),
        n_steps: trace.n_steps(),
    };
    serde_json::to_writer(&mut out, &header)?;
    out.write_all(b"\n")?;
    let mut batches = trace.observation_batches.iter().peekable();
    for k in 0..trace.n_steps() {
        let observations = batches
            .next_if(|b| b.step == k)
            .map(|b| b.observations.clone());
        let rec = TraceRecord::Step {
            step: k,
            t: trace.timestamps[k],
            truth: trace.ground_truth[k].clone(),
            controls: trace.controls[k].clone(),
            observations,
        };
        serde_json::to_writer(&mut out, &rec)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_trace<R: BufRead>(input: R) -> Result<SimulationTrace> {
    let mut lines = input
        .lines()
        .enumerate()
        .filter(|(_, l)| l.as_ref().map(|s| !s.trim().is_empty()).unwrap_or(true));
    let parse = |no: usize, line: std::io::Result<String>| -> Result<TraceRecord> {
        serde_json::from_str(&line?)
            .map_err(|e| Error::invalid(format!("trace line {}: {e}", no + 1)))
    };
    let (scenario, n_steps) = match lines.next() {
        Some((no, l)) => match parse(no, l)? {
            TraceRecord::Header { scenario, n_steps } => (scenario, n_steps),
            _ => return Err(Error::invalid("trace line 1: expected a header record")),
        },
        None => return Err(Error::invalid("trace is empty")),
    };
    scenario.validate()?;
    let n = scenario.n_robots;

    let mut trace = SimulationTrace {
        scenario,
        timestamps: Vec::with_capacity(n_steps),
        ground_truth: Vec::with_capacity(n_steps),
        controls: Vec::with_capacity(n_steps),
        observation_batches: Vec::new(),
    };
    for (no, l) in lines {
        let TraceRecord::Step {
            step,
            t,
            truth,
            controls,
            observations,
        } = parse(no, l)?
        else {
            return Err(Error::invalid(format!(
                "trace line {}: unexpected header",
                no + 1
            )));
        };
        if step != trace.timestamps.len() {
            return Err(Error::invalid(format!(
                "trace line {}: expected step {}, found {step}",
                no + 1,
                trace.timestamps.len()
            )));
        }
        if truth.len() != n || controls.len() != n {
            return Err(Error::invalid(format!(
                "trace line {}: expected {n} robots",
                no + 1
            )));
        }
        if trace.timestamps.last().is_some_and(|&prev| t <= prev) {
            return Err(Error::invalid(format!(
                "trace line {}: timestamps must increase",
                no + 1
            )));
        }
        if let Some(obs) = observations {
            if obs.len() != n {
                return Err(Error::invalid(format!(
                    "trace line {}: expected {n} observation lists",
                    no + 1
                )));
            }
            for (i, list) in obs.iter().enumerate() {
                for o in list {
                    o.validate()?;
                    if o.observer != i || o.target >= n {
                        return Err(Error::invalid(format!(
                            "trace line {}: observation {}->{} filed under robot {i}",
                            no + 1,
                            o.observer,
                            o.target
                        )));
                    }
                }
            }
            trace.observation_batches.push(SensorBatch {
                step,
                observations: obs,
            });
        }
        for c in &controls {
            c.validate()?;
        }
        trace.timestamps.push(t);
        trace.ground_truth.push(truth);
        trace.controls.push(controls);
    }
    if trace.timestamps.len() != n_steps {
        return Err(Error::invalid(format!(
            "trace header announces {n_steps} steps but {} were read",
            trace.timestamps.len()
        )));
    }
    Ok(trace)
}
