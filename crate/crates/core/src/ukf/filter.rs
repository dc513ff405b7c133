use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector, Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use super::sigma::{
    generate_sigma_points, identity_transform, repair_psd, residual, SigmaPointParams, Transformed,
    N_SIGMA, STATE_ANGLES, STATE_DIM,
};
use crate::error::{Error, Result};
use crate::geometry::{check_covariance, wrap_angle, Pose2D};
use crate::kinematics::{integrate, ControlInput};

/// Per-predict-step process noise (cm, cm, rad).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MotionNoise {
    pub sigma_x: f64,
    pub sigma_y: f64,
    pub sigma_theta: f64,
}

impl Default for MotionNoise {
    /// σ_x = σ_y = 0.1 cm and σ_θ = 0.03 rad per step at 30 Hz.
    fn default() -> Self {
        Self {
            sigma_x: 0.1,
            sigma_y: 0.1,
            sigma_theta: 0.03,
        }
    }
}

impl MotionNoise {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("sigma_x", self.sigma_x),
            ("sigma_y", self.sigma_y),
            ("sigma_theta", self.sigma_theta),
        ] {
            if !v.is_finite() || v <= 0.0 {
                return Err(Error::invalid(format!("{name} must be > 0, got {v}")));
            }
        }
        Ok(())
    }

    pub fn covariance(&self) -> Matrix3<f64> {
        Matrix3::from_diagonal(&Vector3::new(
            self.sigma_x.powi(2),
            self.sigma_y.powi(2),
            self.sigma_theta.powi(2),
        ))
    }
}

/// Range/bearing noise assumed by the filter. `R` is this 2×2 block tiled
/// along the diagonal once per sighted robot.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeasurementNoise {
    pub sigma_dist: f64,
    pub sigma_angle: f64,
}

impl Default for MeasurementNoise {
    fn default() -> Self {
        Self {
            sigma_dist: 15.0,
            sigma_angle: 0.15,
        }
    }
}

impl MeasurementNoise {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_dist.is_finite() && self.sigma_dist > 0.0)
            || !(self.sigma_angle.is_finite() && self.sigma_angle > 0.0)
        {
            return Err(Error::invalid(format!(
                "measurement sigmas must be > 0, got {} cm / {} rad",
                self.sigma_dist, self.sigma_angle
            )));
        }
        Ok(())
    }

    /// `diag(σ_dist², σ_angle², σ_dist², σ_angle², ...)` for `k` sightings.
    pub fn tiled(&self, k: usize) -> DMatrix<f64> {
        let (d, a) = (self.sigma_dist.powi(2), self.sigma_angle.powi(2));
        DMatrix::from_diagonal(&DVector::from_fn(
            2 * k,
            |i, _| if i % 2 == 0 { d } else { a },
        ))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeasurementEntry {
    pub target: usize,
    pub range: f64,
    pub bearing: f64,
}

/// One scan from `observer`: the robots it saw, plus the current estimate of
/// each of them, used as a landmark.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementBatch {
    pub observer: usize,
    pub entries: Vec<MeasurementEntry>,
    pub landmark_poses: BTreeMap<usize, Pose2D>,
}

impl MeasurementBatch {
    fn landmarks(&self) -> Result<Vec<(usize, Pose2D)>> {
        self.entries
            .iter()
            .map(|e| {
                self.landmark_poses
                    .get(&e.target)
                    .map(|p| (e.target, *p))
                    .ok_or_else(|| {
                        Error::invalid(format!("no landmark pose for robot {}", e.target))
                    })
            })
            .collect()
    }

    fn measurement_vector(&self) -> DVector<f64> {
        DVector::from_iterator(
            2 * self.entries.len(),
            self.entries.iter().flat_map(|e| [e.range, e.bearing]),
        )
    }
}

/// Stacked `(range, bearing)` of each landmark as seen from `state`.
///
/// Range is the linear distance; bearing is `atan2(Δy, Δx) − θ` wrapped.
pub fn measurement_function(
    state: &Vector3<f64>,
    landmarks: &[(usize, Pose2D)],
) -> Result<DVector<f64>> {
    if landmarks.is_empty() {
        return Err(Error::invalid("measurement needs at least one landmark"));
    }
    let mut z = DVector::zeros(2 * landmarks.len());
    for (k, (id, lm)) in landmarks.iter().enumerate() {
        let (dx, dy) = (lm.x - state[0], lm.y - state[1]);
        let r = dx.hypot(dy);
        if r == 0.0 {
            return Err(Error::Degenerate(format!(
                "landmark {id} coincides with the observer"
            )));
        }
        z[2 * k] = r;
        z[2 * k + 1] = wrap_angle(dy.atan2(dx) - state[2]);
    }
    Ok(z)
}

/// `h(center + offset) − h(center)` with bearings wrapped, evaluated from the
/// offset itself so tiny sigma spreads keep full relative precision.
fn measurement_deviation(
    center: &Vector3<f64>,
    offset: &Vector3<f64>,
    landmarks: &[(usize, Pose2D)],
) -> Result<DVector<f64>> {
    let mut d = DVector::zeros(2 * landmarks.len());
    let dp = Vector2::new(offset[0], offset[1]);
    for (k, (id, lm)) in landmarks.iter().enumerate() {
        let v0 = Vector2::new(lm.x - center[0], lm.y - center[1]);
        let vi = v0 - dp;
        let (r0, ri) = (v0.norm(), vi.norm());
        if r0 == 0.0 || ri == 0.0 {
            return Err(Error::Degenerate(format!(
                "landmark {id} coincides with the observer"
            )));
        }
        // |vi|² − |v0|² = −dp·(2 v0 − dp)
        d[2 * k] = -dp.dot(&(2.0 * v0 - dp)) / (ri + r0);
        let cross = -v0.perp(&dp);
        let dot = v0.norm_squared() - v0.dot(&dp);
        d[2 * k + 1] = wrap_angle(cross.atan2(dot) - offset[2]);
    }
    Ok(d)
}

fn measurement_angles(k: usize) -> Vec<bool> {
    (0..2 * k).map(|i| i % 2 == 1).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub enum UpdateOutcome {
    Applied {
        /// Measured minus predicted, bearings wrapped into (-π, π].
        innovation: DVector<f64>,
    },
    Skipped {
        reason: String,
    },
}

impl UpdateOutcome {
    pub fn is_applied(&self) -> bool {
        matches!(self, UpdateOutcome::Applied { .. })
    }
}

/// Unscented Kalman filter over one robot's `[x, y, θ]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RobotFilter {
    pub robot_id: usize,
    state: Vector3<f64>,
    covariance: Matrix3<f64>,
    pub params: SigmaPointParams,
    pub motion_noise: MotionNoise,
}

impl RobotFilter {
    pub fn new(
        robot_id: usize,
        pose: Pose2D,
        covariance: Matrix3<f64>,
        params: SigmaPointParams,
        motion_noise: MotionNoise,
    ) -> Result<Self> {
        if !pose.is_finite() {
            return Err(Error::NonFinite("initial pose"));
        }
        check_covariance(&covariance)?;
        params.validate()?;
        motion_noise.validate()?;
        Ok(Self {
            robot_id,
            state: Pose2D::new(pose.x, pose.y, pose.theta).to_vector(),
            covariance: (covariance + covariance.transpose()) * 0.5,
            params,
            motion_noise,
        })
    }

    pub fn state(&self) -> &Vector3<f64> {
        &self.state
    }

    pub fn pose(&self) -> Pose2D {
        Pose2D::from_vector(&self.state)
    }

    pub fn covariance(&self) -> &Matrix3<f64> {
        &self.covariance
    }

    /// Propagates every sigma point through the differential-drive model and
    /// adds `Q`.
    pub fn predict(&mut self, control: &ControlInput) -> Result<()> {
        control.validate()?;
        let sp = generate_sigma_points(&self.state, &self.covariance, &self.params)?;

        // Motion is translation invariant, so deviations are built from the
        // sigma offsets plus per-point motion increments rather than by
        // differencing absolute positions.
        let increments: Vec<Vector3<f64>> = sp
            .points
            .iter()
            .map(|p| {
                let (x, y, th) = integrate(0.0, 0.0, p[2], control);
                Vector3::new(x, y, th - p[2])
            })
            .collect();
        let center = self.state + increments[0];
        let deviations: Vec<DVector<f64>> = (0..N_SIGMA)
            .map(|i| {
                let d = sp.offsets[i] + (increments[i] - increments[0]);
                DVector::from_column_slice(d.as_slice())
            })
            .collect();
        let t = Transformed::new(
            DVector::from_column_slice(center.as_slice()),
            deviations,
            &STATE_ANGLES,
            sp.weights,
        );
        let mean = t.mean(&STATE_ANGLES);
        let cov = t.covariance();

        self.state = Vector3::new(mean[0], mean[1], mean[2]);
        let p: Matrix3<f64> = cov.fixed_view::<STATE_DIM, STATE_DIM>(0, 0).into_owned();
        self.covariance = repair_psd(&(p + self.motion_noise.covariance()));
        Ok(())
    }

    /// Standard UKF correction against a variable-length scan.
    ///
    /// Degenerate geometry (a landmark on top of a sigma point, or a singular
    /// innovation covariance) skips the update and leaves the filter as is.
    pub fn update(
        &mut self,
        batch: &MeasurementBatch,
        noise: &MeasurementNoise,
    ) -> Result<UpdateOutcome> {
        noise.validate()?;
        if batch.entries.is_empty() {
            return Err(Error::invalid("update needs a non-empty batch"));
        }
        if batch.observer != self.robot_id {
            return Err(Error::invalid(format!(
                "batch from robot {} applied to filter {}",
                batch.observer, self.robot_id
            )));
        }
        for e in &batch.entries {
            if !(e.range.is_finite() && e.bearing.is_finite()) {
                return Err(Error::NonFinite("measurement"));
            }
        }
        let landmarks = batch.landmarks()?;
        let k = landmarks.len();
        let angles = measurement_angles(k);

        let sp = generate_sigma_points(&self.state, &self.covariance, &self.params)?;
        let z_center = measurement_function(&self.state, &landmarks);
        let z_dev: Result<Vec<DVector<f64>>> = sp
            .offsets
            .iter()
            .map(|o| measurement_deviation(&self.state, o, &landmarks))
            .collect();
        let (z_center, z_dev) = match (z_center, z_dev) {
            (Ok(c), Ok(d)) => (c, d),
            (Err(Error::Degenerate(reason)), _) | (_, Err(Error::Degenerate(reason))) => {
                log::warn!("robot {}: update skipped: {reason}", self.robot_id);
                return Ok(UpdateOutcome::Skipped { reason });
            }
            (Err(e), _) | (_, Err(e)) => return Err(e),
        };
        let zt = Transformed::new(z_center, z_dev, &angles, sp.weights);
        let xt = identity_transform(&sp);

        let z_pred = zt.mean(&angles);
        let s = zt.covariance() + noise.tiled(k);
        let pxz = xt.cross_covariance(&zt);

        let Some(chol) = s.clone().cholesky() else {
            let reason = "innovation covariance is not positive definite".to_string();
            log::warn!("robot {}: update skipped: {reason}", self.robot_id);
            return Ok(UpdateOutcome::Skipped { reason });
        };
        // K = Pxz S⁻¹, i.e. S Kᵀ = Pxzᵀ
        let gain = chol.solve(&pxz.transpose()).transpose();
        let innovation = residual(&batch.measurement_vector(), &z_pred, &angles);

        let dx = &gain * &innovation;
        let ks = &gain * &s;
        let dp = &ks * gain.transpose();
        let mut state = self.state + Vector3::new(dx[0], dx[1], dx[2]);
        state[2] = wrap_angle(state[2]);
        let p = self.covariance - dp.fixed_view::<STATE_DIM, STATE_DIM>(0, 0).into_owned();

        if state.iter().any(|v| !v.is_finite()) || p.iter().any(|v| !v.is_finite()) {
            let reason = "update produced a non-finite state".to_string();
            log::warn!("robot {}: update skipped: {reason}", self.robot_id);
            return Ok(UpdateOutcome::Skipped { reason });
        }
        self.state = state;
        self.covariance = repair_psd(&p);
        Ok(UpdateOutcome::Applied { innovation })
    }
}
