//! Scaled (Van der Merwe) sigma points and the unscented transform.
//!
//! With the default α = 1e-5 the central mean weight is about -1e10 and the
//! outer points sit within ~1e-5σ of the mean. Sums are therefore formed
//! from deviations about the central point, outer points taken in ± pairs,
//! never from absolute coordinates.

use nalgebra::{DMatrix, DVector, Matrix3, SymmetricEigen, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{angle_diff, wrap_angle};

pub const STATE_DIM: usize = 3;
pub const N_SIGMA: usize = 2 * STATE_DIM + 1;

/// Eigenvalues below this make a covariance unacceptable for sigma points.
pub const NEGATIVE_EIGEN_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SigmaPointParams {
    pub alpha: f64,
    pub beta: f64,
    pub kappa: f64,
}

impl Default for SigmaPointParams {
    /// α = 1e-5, β = 2, κ = 3 - n = 0.
    fn default() -> Self {
        Self {
            alpha: 1e-5,
            beta: 2.0,
            kappa: 0.0,
        }
    }
}

impl SigmaPointParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha.is_finite() && self.beta.is_finite() && self.kappa.is_finite()) {
            return Err(Error::NonFinite("sigma point parameters"));
        }
        if self.alpha <= 0.0 {
            return Err(Error::invalid(format!(
                "alpha must be > 0, got {}",
                self.alpha
            )));
        }
        if STATE_DIM as f64 + self.lambda() <= 0.0 {
            return Err(Error::invalid("n + lambda must be positive"));
        }
        Ok(())
    }

    pub fn n_state(&self) -> usize {
        STATE_DIM
    }

    pub fn lambda(&self) -> f64 {
        let n = STATE_DIM as f64;
        self.alpha * self.alpha * (n + self.kappa) - n
    }

    /// `n + λ`, computed without the cancellation of `n + (α²(n+κ) − n)`.
    pub fn spread(&self) -> f64 {
        self.alpha * self.alpha * (STATE_DIM as f64 + self.kappa)
    }

    /// Mean weights `W0 = λ/(n+λ)`, `Wi = 1/(2(n+λ))`; covariance weights
    /// add `1 − α² + β` to the central one.
    ///
    /// `Wi` is snapped to a power-of-two grid fine enough for every partial
    /// sum of the mean weights to be exact (a relative change below 2⁻⁵⁰),
    /// and `W0` is taken as `1 − 2n·Wi`, so the mean weights sum to exactly
    /// one in floating point even when `W0` is of order -1e10.
    pub fn weights(&self) -> SigmaWeights {
        let spread = self.spread();
        let two_n = 2.0 * STATE_DIM as f64;
        let raw = 1.0 / (2.0 * spread);
        let grid = 2f64.powi((two_n * raw + 1.0).log2().floor() as i32 - 52);
        let wi = (raw / grid).round() * grid;
        let w0 = 1.0 - two_n * wi;
        let mut mean = [wi; N_SIGMA];
        let mut cov = [wi; N_SIGMA];
        mean[0] = w0;
        cov[0] = w0 + (1.0 - self.alpha * self.alpha + self.beta);
        SigmaWeights {
            mean,
            cov,
            cov_excess: 1.0 - self.alpha * self.alpha + self.beta,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SigmaWeights {
    pub mean: [f64; N_SIGMA],
    pub cov: [f64; N_SIGMA],
    /// `cov[0] - mean[0]`, i.e. `1 − α² + β`.
    pub cov_excess: f64,
}

impl SigmaWeights {
    fn outer(&self) -> f64 {
        self.mean[1]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SigmaPoints {
    pub points: [Vector3<f64>; N_SIGMA],
    /// `points[i] - points[0]`, exact (not recomputed from the sums).
    pub offsets: [Vector3<f64>; N_SIGMA],
    pub weights: SigmaWeights,
}

/// Symmetric square root `V diag(√max(λ,0)) Vᵀ`.
pub fn psd_sqrt(cov: &Matrix3<f64>) -> Result<Matrix3<f64>> {
    if cov.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("covariance"));
    }
    let sym = (cov + cov.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let min = eig.eigenvalues.min();
    if min < -NEGATIVE_EIGEN_TOL {
        return Err(Error::invalid(format!(
            "covariance has eigenvalue {min:e}, not positive semi-definite"
        )));
    }
    let root = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    Ok(eig.eigenvectors * Matrix3::from_diagonal(&root) * eig.eigenvectors.transpose())
}

/// Clamps negative eigenvalues to zero and symmetrizes.
pub(crate) fn repair_psd(cov: &Matrix3<f64>) -> Matrix3<f64> {
    let sym = (cov + cov.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    if eig.eigenvalues.min() >= 0.0 {
        return sym;
    }
    let clamped = eig.eigenvalues.map(|l| l.max(0.0));
    let r = eig.eigenvectors * Matrix3::from_diagonal(&clamped) * eig.eigenvectors.transpose();
    (r + r.transpose()) * 0.5
}

pub fn generate_sigma_points(
    mean: &Vector3<f64>,
    covariance: &Matrix3<f64>,
    params: &SigmaPointParams,
) -> Result<SigmaPoints> {
    params.validate()?;
    let root = psd_sqrt(covariance)? * params.spread().sqrt();
    let mut offsets = [Vector3::zeros(); N_SIGMA];
    for i in 0..STATE_DIM {
        let col = root.column(i).into_owned();
        offsets[1 + i] = col;
        offsets[1 + STATE_DIM + i] = -col;
    }
    let points = offsets.map(|d| mean + d);
    Ok(SigmaPoints {
        points,
        offsets,
        weights: params.weights(),
    })
}

/// Unscented statistics of transformed sigma points, kept as deviations
/// from the transformed central point.
#[derive(Debug, Clone)]
pub struct Transformed {
    /// Transformed central point.
    pub center: DVector<f64>,
    /// `y_i - y_0` for i = 0..7 (angle components wrapped).
    pub deviations: Vec<DVector<f64>>,
    /// Weighted mean minus `center`.
    pub mean_offset: DVector<f64>,
    /// `Σ_{i≥1} W_i d_i`, the linear weighted deviation sum.
    pub linear_offset: DVector<f64>,
    pub weights: SigmaWeights,
}

impl Transformed {
    /// `deviations` must hold 7 vectors with `deviations[0] == 0`; components
    /// flagged in `is_angle` are averaged on the circle.
    pub fn new(
        center: DVector<f64>,
        deviations: Vec<DVector<f64>>,
        is_angle: &[bool],
        weights: SigmaWeights,
    ) -> Self {
        debug_assert_eq!(deviations.len(), N_SIGMA);
        let dim = center.len();
        let w = weights.outer();
        let mut linear = DVector::zeros(dim);
        for i in 1..=STATE_DIM {
            linear += (&deviations[i] + &deviations[i + STATE_DIM]) * w;
        }
        let mut mean_offset = linear.clone();
        for (k, _) in is_angle.iter().enumerate().filter(|(_, a)| **a) {
            let (mut s, mut c) = (0.0, 0.0);
            for i in 1..=STATE_DIM {
                let (a, b) = (deviations[i][k], deviations[i + STATE_DIM][k]);
                s += w * (a.sin() + b.sin());
                // cos d - 1 = -2 sin²(d/2)
                c -= 2.0 * w * ((0.5 * a).sin().powi(2) + (0.5 * b).sin().powi(2));
            }
            mean_offset[k] = s.atan2(1.0 + c);
        }
        Self {
            center,
            deviations,
            mean_offset,
            linear_offset: linear,
            weights,
        }
    }

    pub fn mean(&self, is_angle: &[bool]) -> DVector<f64> {
        let mut m = &self.center + &self.mean_offset;
        for (k, _) in is_angle.iter().enumerate().filter(|(_, a)| **a) {
            m[k] = wrap_angle(m[k]);
        }
        m
    }

    /// `Σ_i Wc_i (a_i − m_a)(b_i − m_b)ᵀ` expanded about the central point:
    /// `Σ_{i≥1} W a_i b_iᵀ − s_a m_bᵀ − m_a s_bᵀ + (Σ Wc) m_a m_bᵀ`.
    pub fn cross_covariance(&self, other: &Transformed) -> DMatrix<f64> {
        let w = self.weights.outer();
        let mut acc = DMatrix::zeros(self.center.len(), other.center.len());
        for i in 1..N_SIGMA {
            acc += &self.deviations[i] * other.deviations[i].transpose() * w;
        }
        let total_cov_weight = 1.0 + self.weights.cov_excess;
        acc -= &self.linear_offset * other.mean_offset.transpose();
        acc -= &self.mean_offset * other.linear_offset.transpose();
        acc += &self.mean_offset * other.mean_offset.transpose() * total_cov_weight;
        acc
    }

    pub fn covariance(&self) -> DMatrix<f64> {
        let c = self.cross_covariance(self);
        (&c + c.transpose()) * 0.5
    }
}

/// The untransformed sigma points as a [`Transformed`] over the state.
pub fn identity_transform(sp: &SigmaPoints) -> Transformed {
    let center = DVector::from_column_slice(sp.points[0].as_slice());
    let devs = sp
        .offsets
        .iter()
        .map(|d| DVector::from_column_slice(d.as_slice()))
        .collect();
    Transformed::new(center, devs, &STATE_ANGLES, sp.weights)
}

pub const STATE_ANGLES: [bool; STATE_DIM] = [false, false, true];

/// Wrapped difference for angle components, plain subtraction otherwise.
pub fn residual(a: &DVector<f64>, b: &DVector<f64>, is_angle: &[bool]) -> DVector<f64> {
    let mut r = a - b;
    for (k, _) in is_angle.iter().enumerate().filter(|(_, x)| **x) {
        r[k] = angle_diff(a[k], b[k]);
    }
    r
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn weights_sum_to_one() {
        for params in [
            SigmaPointParams::default(),
            SigmaPointParams {
                alpha: 0.5,
                beta: 2.0,
                kappa: 1.0,
            },
            SigmaPointParams {
                alpha: 1.0,
                beta: 0.0,
                kappa: 0.0,
            },
        ] {
            let w = params.weights();
            let sum_mean: f64 = w.mean.iter().sum();
            assert!((sum_mean - 1.0).abs() < 1e-12, "{sum_mean}");
            let sum_cov: f64 = w.cov.iter().sum();
            let expected = 2.0 - params.alpha.powi(2) + params.beta;
            assert!((sum_cov - expected).abs() < 1e-12 * w.cov[0].abs().max(1.0));
        }
    }

    #[test]
    fn default_params_match_published_choice() {
        let p = SigmaPointParams::default();
        let lambda = 1e-10 * 3.0 - 3.0;
        assert_abs_diff_eq!(p.lambda(), lambda, epsilon = 1e-15);
        let w = p.weights();
        assert!((w.mean[0] / (lambda / (3.0 + lambda)) - 1.0).abs() < 1e-6);
        assert!(w.mean[0] < -1e9);
    }

    #[test]
    fn identity_covariance_points_lie_on_axes() {
        let p = SigmaPointParams::default();
        let sp = generate_sigma_points(&Vector3::zeros(), &Matrix3::identity(), &p).unwrap();
        let s = p.spread().sqrt();
        assert_eq!(sp.points[0], Vector3::zeros());
        for i in 0..3 {
            let mut e = Vector3::zeros();
            e[i] = s;
            assert_abs_diff_eq!((sp.points[1 + i] - e).norm(), 0.0, epsilon = 1e-20);
            assert_abs_diff_eq!((sp.points[4 + i] + e).norm(), 0.0, epsilon = 1e-20);
        }
    }

    #[test]
    fn zero_covariance_collapses_points() {
        let m = Vector3::new(1.0, 2.0, 0.3);
        let sp =
            generate_sigma_points(&m, &Matrix3::zeros(), &SigmaPointParams::default()).unwrap();
        assert!(sp.points.iter().all(|p| *p == m));
    }

    #[test]
    fn rejects_indefinite_covariance() {
        let c = Matrix3::from_diagonal(&Vector3::new(1.0, -1e-6, 1.0));
        assert!(
            generate_sigma_points(&Vector3::zeros(), &c, &SigmaPointParams::default()).is_err()
        );
        let tiny = Matrix3::from_diagonal(&Vector3::new(1.0, -1e-12, 1.0));
        assert!(
            generate_sigma_points(&Vector3::zeros(), &tiny, &SigmaPointParams::default()).is_ok()
        );
    }

    #[test]
    fn round_trip_recovers_mean_and_covariance() {
        let cov = Matrix3::new(225.0, 30.0, 0.5, 30.0, 100.0, -0.2, 0.5, -0.2, 0.09);
        let mean = Vector3::new(120.0, -45.0, 3.1);
        for params in [
            SigmaPointParams::default(),
            SigmaPointParams {
                alpha: 0.3,
                beta: 2.0,
                kappa: 0.0,
            },
        ] {
            let sp = generate_sigma_points(&mean, &cov, &params).unwrap();
            let t = identity_transform(&sp);
            let m = t.mean(&STATE_ANGLES);
            assert_abs_diff_eq!(m[0], mean[0], epsilon = 1e-9);
            assert_abs_diff_eq!(m[1], mean[1], epsilon = 1e-9);
            assert_abs_diff_eq!(angle_diff(m[2], mean[2]), 0.0, epsilon = 1e-9);
            let c = t.covariance();
            for i in 0..3 {
                for j in 0..3 {
                    assert_abs_diff_eq!(c[(i, j)], cov[(i, j)], epsilon = 1e-9);
                }
            }
        }
    }

    #[test]
    fn angle_mean_straddles_pi() {
        // points on both sides of ±π average to π, not 0
        let params = SigmaPointParams {
            alpha: 1.0,
            beta: 2.0,
            kappa: 0.0,
        };
        let cov = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, 0.04));
        let sp = generate_sigma_points(&Vector3::new(0.0, 0.0, 3.1), &cov, &params).unwrap();
        let t = identity_transform(&sp);
        let m = t.mean(&STATE_ANGLES);
        assert_abs_diff_eq!(m[2], 3.1, epsilon = 1e-12);
    }
}
