//! Differential-drive kinematics shared by the simulator's ground truth and
//! the filter's predict step.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{wrap_angle, Pose2D};

/// Below this turn rate the straight-line limit of the arc formula is used.
pub const STRAIGHT_LINE_OMEGA: f64 = 1e-9;

/// Wheel speeds (cm/s) held for `dt` seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControlInput {
    pub left_wheel_speed: f64,
    pub right_wheel_speed: f64,
    pub dt: f64,
    pub wheel_base: f64,
}

impl ControlInput {
    pub fn new(left: f64, right: f64, dt: f64, wheel_base: f64) -> Result<Self> {
        let c = Self {
            left_wheel_speed: left,
            right_wheel_speed: right,
            dt,
            wheel_base,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn stationary(dt: f64, wheel_base: f64) -> Self {
        Self {
            left_wheel_speed: 0.0,
            right_wheel_speed: 0.0,
            dt,
            wheel_base,
        }
    }

    /// Wheel speeds producing body velocities `v` (cm/s) and `omega` (rad/s).
    pub fn from_body_velocity(v: f64, omega: f64, dt: f64, wheel_base: f64) -> Self {
        let half = 0.5 * omega * wheel_base;
        Self {
            left_wheel_speed: v - half,
            right_wheel_speed: v + half,
            dt,
            wheel_base,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let vals = [
            self.left_wheel_speed,
            self.right_wheel_speed,
            self.dt,
            self.wheel_base,
        ];
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("control input"));
        }
        if self.dt <= 0.0 {
            return Err(Error::invalid(format!(
                "control dt must be > 0, got {}",
                self.dt
            )));
        }
        if self.wheel_base <= 0.0 {
            return Err(Error::invalid(format!(
                "wheel base must be > 0, got {}",
                self.wheel_base
            )));
        }
        Ok(())
    }

    pub fn linear_velocity(&self) -> f64 {
        0.5 * (self.left_wheel_speed + self.right_wheel_speed)
    }

    pub fn angular_velocity(&self) -> f64 {
        (self.right_wheel_speed - self.left_wheel_speed) / self.wheel_base
    }

    /// Same control with both wheel speeds multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            left_wheel_speed: self.left_wheel_speed * factor,
            right_wheel_speed: self.right_wheel_speed * factor,
            ..*self
        }
    }
}

/// Exact integration of constant wheel speeds over `control.dt`.
pub fn integrate(x: f64, y: f64, theta: f64, control: &ControlInput) -> (f64, f64, f64) {
    let v = control.linear_velocity();
    let w = control.angular_velocity();
    let dt = control.dt;
    if w.abs() < STRAIGHT_LINE_OMEGA {
        (x + v * dt * theta.cos(), y + v * dt * theta.sin(), theta)
    } else {
        let r = v / w;
        let th1 = theta + w * dt;
        (
            x + r * (th1.sin() - theta.sin()),
            y + r * (theta.cos() - th1.cos()),
            th1,
        )
    }
}

pub fn advance(pose: &Pose2D, control: &ControlInput) -> Pose2D {
    let (x, y, th) = integrate(pose.x, pose.y, pose.theta, control);
    Pose2D {
        x,
        y,
        theta: wrap_angle(th),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    /// Classical RK4 on ẋ = v cosθ, ẏ = v sinθ, θ̇ = ω.
    fn rk4(pose: (f64, f64, f64), v: f64, w: f64, dt: f64, steps: usize) -> (f64, f64, f64) {
        let f = |s: (f64, f64, f64)| (v * s.2.cos(), v * s.2.sin(), w);
        let h = dt / steps as f64;
        let mut s = pose;
        for _ in 0..steps {
            let k1 = f(s);
            let k2 = f((
                s.0 + 0.5 * h * k1.0,
                s.1 + 0.5 * h * k1.1,
                s.2 + 0.5 * h * k1.2,
            ));
            let k3 = f((
                s.0 + 0.5 * h * k2.0,
                s.1 + 0.5 * h * k2.1,
                s.2 + 0.5 * h * k2.2,
            ));
            let k4 = f((s.0 + h * k3.0, s.1 + h * k3.1, s.2 + h * k3.2));
            s = (
                s.0 + h / 6.0 * (k1.0 + 2.0 * k2.0 + 2.0 * k3.0 + k4.0),
                s.1 + h / 6.0 * (k1.1 + 2.0 * k2.1 + 2.0 * k3.1 + k4.1),
                s.2 + h / 6.0 * (k1.2 + 2.0 * k2.2 + 2.0 * k3.2 + k4.2),
            );
        }
        s
    }

    #[test]
    fn forward_three_cm_per_second_for_one_predict_step() {
        let c = ControlInput::new(3.0, 3.0, 1.0 / 30.0, 8.0).unwrap();
        let p = advance(&Pose2D::origin(), &c);
        assert_abs_diff_eq!(p.x, 0.1, epsilon = 1e-12);
        assert_abs_diff_eq!(p.y, 0.0, epsilon = 1e-12);
        assert_eq!(p.theta, 0.0);
    }

    #[test]
    fn arc_matches_rk4() {
        let c = ControlInput::new(0.0, 2.0, 1.0, 10.0).unwrap();
        let start = (1.0, -2.0, 0.4);
        let (x, y, th) = integrate(start.0, start.1, start.2, &c);
        let (rx, ry, rth) = rk4(start, c.linear_velocity(), c.angular_velocity(), 1.0, 1000);
        assert_abs_diff_eq!(x, rx, epsilon = 1e-6);
        assert_abs_diff_eq!(y, ry, epsilon = 1e-6);
        assert_abs_diff_eq!(th, rth, epsilon = 1e-9);
    }

    #[test]
    fn rotate_in_place() {
        let w = 20f64.to_radians();
        let c = ControlInput::from_body_velocity(0.0, w, 1.0, 8.0);
        let p = advance(&Pose2D::new(5.0, 5.0, 0.0), &c);
        assert_abs_diff_eq!(p.x, 5.0, epsilon = 1e-12);
        assert_abs_diff_eq!(p.y, 5.0, epsilon = 1e-12);
        assert_abs_diff_eq!(p.theta, w, epsilon = 1e-12);
    }

    #[test]
    fn arc_is_continuous_at_straight_limit() {
        let straight = ControlInput::new(3.0, 3.0, 0.5, 8.0).unwrap();
        let nearly = ControlInput::new(3.0, 3.0 + 1e-7, 0.5, 8.0).unwrap();
        let a = integrate(0.0, 0.0, 0.9, &straight);
        let b = integrate(0.0, 0.0, 0.9, &nearly);
        assert_abs_diff_eq!(a.0, b.0, epsilon = 1e-6);
        assert_abs_diff_eq!(a.1, b.1, epsilon = 1e-6);
    }

    #[test]
    fn invalid_controls() {
        assert!(ControlInput::new(1.0, 1.0, 0.0, 8.0).is_err());
        assert!(ControlInput::new(1.0, 1.0, 0.1, 0.0).is_err());
        assert!(ControlInput::new(f64::NAN, 1.0, 0.1, 8.0).is_err());
    }
}
