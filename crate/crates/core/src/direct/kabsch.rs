//! Rigid 2D alignment (Kabsch) used to remove the unobservable global
//! rotation and translation before comparing an estimate with ground truth.

use nalgebra::{Matrix2, Rotation2, Vector2};

use crate::error::{Error, Result};
use crate::geometry::{wrap_angle, Pose2D};

#[derive(Debug, Clone, PartialEq)]
pub struct Alignment {
    /// Counter-clockwise angle (rad) taking the estimate onto the reference.
    pub rotation: f64,
    pub translation: Vector2<f64>,
    pub aligned: Vec<Vector2<f64>>,
    pub rms_error: f64,
}

impl Alignment {
    pub fn rotation_matrix(&self) -> Matrix2<f64> {
        *Rotation2::new(self.rotation).matrix()
    }

    pub fn apply_point(&self, p: &Vector2<f64>) -> Vector2<f64> {
        Rotation2::new(self.rotation) * p + self.translation
    }

    pub fn apply_pose(&self, p: &Pose2D) -> Pose2D {
        let q = self.apply_point(&p.position());
        Pose2D::new(q.x, q.y, p.theta + self.rotation)
    }

    /// Euclidean distance between each aligned point and its reference.
    pub fn point_errors(&self, reference: &[Vector2<f64>]) -> Vec<f64> {
        self.aligned
            .iter()
            .zip(reference)
            .map(|(a, r)| (a - r).norm())
            .collect()
    }
}

fn centroid(points: &[Vector2<f64>]) -> Vector2<f64> {
    points.iter().sum::<Vector2<f64>>() / points.len() as f64
}

fn is_degenerate(centered: &[Vector2<f64>], c: &Vector2<f64>) -> bool {
    let spread = centered.iter().map(|p| p.norm()).fold(0.0, f64::max);
    spread <= 1e-12 * (1.0 + c.norm())
}

/// Best proper rotation plus translation mapping `estimated` onto `reference`.
///
/// In 2D the cross-covariance `H = Σ aᵢ bᵢᵀ` of the centered sets gives the
/// optimal angle directly as `atan2(H₀₁ - H₁₀, H₀₀ + H₁₁)`, which can never
/// produce a reflection.
pub fn kabsch_align(estimated: &[Vector2<f64>], reference: &[Vector2<f64>]) -> Result<Alignment> {
    if estimated.len() != reference.len() {
        return Err(Error::invalid(format!(
            "point counts differ: {} estimated vs {} reference",
            estimated.len(),
            reference.len()
        )));
    }
    if estimated.len() < 2 {
        return Err(Error::AlignmentUndefined(
            "at least two points are required".into(),
        ));
    }
    if estimated
        .iter()
        .chain(reference)
        .any(|p| !p.iter().all(|v| v.is_finite()))
    {
        return Err(Error::NonFinite("alignment input"));
    }

    let ce = centroid(estimated);
    let cr = centroid(reference);
    let a: Vec<_> = estimated.iter().map(|p| p - ce).collect();
    let b: Vec<_> = reference.iter().map(|p| p - cr).collect();
    if is_degenerate(&a, &ce) || is_degenerate(&b, &cr) {
        return Err(Error::AlignmentUndefined("all points coincide".into()));
    }

    let h: Matrix2<f64> = a.iter().zip(&b).map(|(p, q)| p * q.transpose()).sum();
    let rotation = wrap_angle((h[(0, 1)] - h[(1, 0)]).atan2(h[(0, 0)] + h[(1, 1)]));
    let rot = Rotation2::new(rotation);
    let translation = cr - rot * ce;

    let aligned: Vec<_> = estimated.iter().map(|p| rot * p + translation).collect();
    let ss: f64 = aligned
        .iter()
        .zip(reference)
        .map(|(p, q)| (p - q).norm_squared())
        .sum();

    Ok(Alignment {
        rotation,
        translation,
        aligned,
        rms_error: (ss / estimated.len() as f64).sqrt(),
    })
}

/// Aligns pose positions and returns the alignment together with the mean
/// and max per-robot position error.
pub fn align_poses(estimated: &[Pose2D], truth: &[Pose2D]) -> Result<(Alignment, f64, f64)> {
    let est: Vec<_> = estimated.iter().map(Pose2D::position).collect();
    let reference: Vec<_> = truth.iter().map(Pose2D::position).collect();
    let al = kabsch_align(&est, &reference)?;
    let errs = al.point_errors(&reference);
    let mean = errs.iter().sum::<f64>() / errs.len() as f64;
    let max = errs.iter().copied().fold(0.0, f64::max);
    Ok((al, mean, max))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use std::f64::consts::FRAC_PI_2;

    fn pts() -> Vec<Vector2<f64>> {
        vec![
            Vector2::new(0.0, 0.0),
            Vector2::new(40.0, 5.0),
            Vector2::new(12.0, 33.0),
            Vector2::new(-7.0, 18.0),
        ]
    }

    #[test]
    fn identity() {
        let p = pts();
        let al = kabsch_align(&p, &p).unwrap();
        assert_abs_diff_eq!(al.rotation, 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(al.translation.norm(), 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(al.rms_error, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn undoes_rotation_about_centroid() {
        let reference = pts();
        let c = centroid(&reference);
        let rot = Rotation2::new(FRAC_PI_2);
        let est: Vec<_> = reference.iter().map(|p| rot * (p - c) + c).collect();
        let al = kabsch_align(&est, &reference).unwrap();
        assert_abs_diff_eq!(al.rotation, -FRAC_PI_2, epsilon = 1e-12);
        assert_abs_diff_eq!(al.rms_error, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(al.rotation_matrix().determinant(), 1.0, epsilon = 1e-15);
    }

    #[test]
    fn mirrored_input_is_not_reflected() {
        let reference = pts();
        let est: Vec<_> = reference.iter().map(|p| Vector2::new(-p.x, p.y)).collect();
        let al = kabsch_align(&est, &reference).unwrap();
        assert_abs_diff_eq!(al.rotation_matrix().determinant(), 1.0, epsilon = 1e-15);
        assert!(al.rms_error > 1.0);
    }

    #[test]
    fn poses_pick_up_the_rotation() {
        let reference = pts();
        let est: Vec<_> = reference
            .iter()
            .map(|p| Rotation2::new(0.4) * p + Vector2::new(3.0, -1.0))
            .collect();
        let al = kabsch_align(&est, &reference).unwrap();
        let pose = Pose2D::new(est[1].x, est[1].y, 1.0);
        let back = al.apply_pose(&pose);
        assert_abs_diff_eq!(back.x, reference[1].x, epsilon = 1e-9);
        assert_abs_diff_eq!(back.theta, 0.6, epsilon = 1e-12);
    }

    #[test]
    fn degenerate_inputs() {
        let same = vec![Vector2::new(1.0, 1.0); 3];
        assert!(matches!(
            kabsch_align(&same, &pts()[..3]),
            Err(Error::AlignmentUndefined(_))
        ));
        assert!(kabsch_align(&pts()[..1], &pts()[..1]).is_err());
        assert!(kabsch_align(&pts(), &pts()[..3]).is_err());
    }
}
